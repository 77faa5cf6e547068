//! Builds the multi-level graph operator for a network, prints the
//! coarsening hierarchy, and runs one denoiser evaluation.

use diffalloc::channel::{generate_network, side_for_density, PhysicalConfig};
use diffalloc::gnn::{build_operator, DenoiserConfig, DenoiserModel, EdgeNormalization, FeatureStats};

fn main() -> diffalloc::error::Result<()> {
    let n = 20;
    let state = generate_network(n, side_for_density(n, 8.0), &PhysicalConfig::default(), 2)?;
    let norm = EdgeNormalization::fit([&state])?;
    let arch = DenoiserConfig::desk();
    let op = build_operator(&state, &norm, arch.depth)?;
    for (level, c) in op.coarsening_maps.iter().enumerate() {
        println!("level {level}: {} -> {} nodes, cluster sizes {:?}", c.assign.len(), c.n_coarse, c.cluster_sizes());
    }

    let raw = state.node_features(0.6);
    let u = FeatureStats::fit(&raw)?.normalize(&raw);
    let model = DenoiserModel::<f32>::init(arch, 3)?;
    println!("{} parameters", model.params.num_scalars());
    let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let eps = model.denoise(&x, 250, &op, &u)?;
    println!("predicted noise at step 250: {:.3?}", eps);
    Ok(())
}
