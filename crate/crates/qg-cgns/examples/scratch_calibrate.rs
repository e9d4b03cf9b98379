use qg_cgns::cgns::{CovMode, NoiseConfig};
use qg_cgns::layer2::{run_layer2_filter, Layer2FilterConfig};
use qg_cgns::{GridSpec, InitialCondition, PhysParams};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args[1].parse().unwrap();
    let steps: usize = args[2].parse().unwrap();
    let seed: u64 = args[3].parse().unwrap();
    let nudge: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let nu: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.04);

    let grid = GridSpec::new(n).unwrap();
    let params = PhysParams { n_steps: steps, smooth_nu: Some(nu), ..PhysParams::default() };
    let noise = NoiseConfig { seed, ..NoiseConfig::default() };
    let mut config = Layer2FilterConfig::new(grid, params, noise);
    config.cov_mode = CovMode::Diagonal;
    config.ic = InitialCondition::Sinusoidal;
    config.proxy_nudge = nudge;
    let t0 = Instant::now();
    match run_layer2_filter(&config) {
        Ok(run) => {
            let last = run.metrics.last().unwrap();
            println!(
                "n={n} Nt={steps} seed={seed} nudge={nudge} nu={nu}: rmse={:.4} corr={:.4} wall={:.1}s",
                last.rmse, last.corr, t0.elapsed().as_secs_f64()
            );
        }
        Err(e) => println!("n={n} Nt={steps} seed={seed}: FAILED {e}"),
    }
}
