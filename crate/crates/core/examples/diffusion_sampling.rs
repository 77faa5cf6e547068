//! Forward noising and DDIM sampling with a predictor that knows the clean
//! signal, which makes the sampler reproduce it exactly.

use diffalloc::diffusion::{ddim_sample, forward_noise, NoisePredictor, NoiseSchedule, SamplerConfig, ScheduleConfig};

struct Known {
    x0: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Known {
    fn block_sizes(&self) -> Vec<usize> {
        vec![self.x0.len()]
    }

    fn predict(&self, x_k: &[f64], steps: &[usize]) -> diffalloc::error::Result<Vec<f64>> {
        let ab = self.schedule.alpha_bar(steps[0]);
        Ok(x_k.iter().zip(&self.x0).map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect())
    }
}

fn main() -> diffalloc::error::Result<()> {
    let schedule = NoiseSchedule::from_config(&ScheduleConfig::default())?;
    for k in [1, 100, 250, 500] {
        println!("alpha_bar({k}) = {:.5}", schedule.alpha_bar(k));
    }
    let x0 = vec![1.0, -1.0, 0.5, -0.25];
    println!("x_250 for unit noise: {:.3?}", forward_noise(&x0, 250, &schedule, &[1.0; 4])?);

    let predictor = Known { x0: x0.clone(), schedule: schedule.clone() };
    let out = ddim_sample(&predictor, &schedule, &SamplerConfig::default(), &[[1, 0]])?;
    println!("DDIM reconstruction: {:.6?}", out);
    Ok(())
}
