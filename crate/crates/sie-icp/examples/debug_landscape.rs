use rand::{RngExt, SeedableRng};
use rand_distr::Distribution;
use nalgebra::DMatrix;
use sie_icp::geometry::{ResidualMatrix, ResidualMode};
use sie_icp::sie::{fit_inlier_model, SieConfig};

fn mixture(inliers: usize, outliers: usize, sigma: f64, dims: usize, seed: u64) -> ResidualMatrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let n = inliers + outliers;
    let mut values = DMatrix::zeros(n, dims);
    for j in 0..dims {
        for i in 0..inliers {
            values[(i, j)] = normal.sample(&mut rng);
        }
        for i in inliers..n {
            values[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let scale = DMatrix::from_element(n, dims, 1.0);
    let mode = if dims == 3 { ResidualMode::PointToPoint } else { ResidualMode::PointToPlane };
    ResidualMatrix::new(values, scale, mode).unwrap()
}

fn main() {
    for frac in [0.01, 0.02, 0.03] {
        println!("== smoothing_fraction {frac}");
        let mut cfg = SieConfig::default();
        cfg.histogram.smoothing_fraction = frac;
        for (name, inl, out, dims) in [
            ("easy 1k/100", 1000, 100, 3),
            ("hard 1k/10k", 1000, 10_000, 3),
            ("pure 100k", 100_000, 0, 1),
            ("crit1 r0.1", 100_000, 10_000, 1),
            ("crit1 r1", 100_000, 100_000, 1),
            ("crit1 r10", 100_000, 1_000_000, 1),
        ] {
            let mut errs = Vec::new();
            let mut priors = Vec::new();
            for seed in 0..4u64 {
                let r = mixture(inl, out, 0.01, dims, 100 + seed);
                let t0 = std::time::Instant::now();
                let model = fit_inlier_model(&r, &cfg).unwrap();
                let dt = t0.elapsed().as_secs_f64();
                for m in model.models() {
                    errs.push((m.sigma / 0.01 - 1.0) * 100.0);
                }
                priors.push(model.inlier_prior());
                if seed == 0 {
                    print!("  [{dt:.2}s]");
                }
            }
            let min = errs.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = errs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pmin = priors.iter().cloned().fold(f64::INFINITY, f64::min);
            let pmax = priors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(" {name}: sigma err [{min:+.1}%, {max:+.1}%]  prior [{pmin:.3}, {pmax:.3}]");
        }
    }
}
