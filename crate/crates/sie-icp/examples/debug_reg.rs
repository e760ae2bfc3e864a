use rand::{RngExt, SeedableRng};
use rand_distr::Distribution;
use sie_icp::geometry::{Correspondence, Point3, PointCloud, RigidTransform, Vec3};
use sie_icp::registration::{register_with_correspondences, RegistrationConfig};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let offset = Vec3::new(0.2, 0.0, 0.0);
    let (inl, out) = (1000, 100);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..inl {
        let p = Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let e: [f64; 3] = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
        b.push(Point3::new(p.x + e[0], p.y + e[1], p.z + e[2]));
        a.push(Point3::new(p.x + offset.x, p.y + offset.y, p.z + offset.z));
    }
    for _ in 0..out {
        let p = Point3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        a.push(p);
        b.push(Point3::new(p.x + rng.random_range(-1.0..1.0), p.y + rng.random_range(-1.0..1.0), p.z + rng.random_range(-1.0..1.0)));
    }
    let a = PointCloud::new(a).unwrap();
    let b = PointCloud::new(b).unwrap();
    let matches: Vec<Correspondence> = (0..inl + out)
        .map(|i| Correspondence { source_index: i, target_index: i, distance: 0.0 })
        .collect();
    let cfg = RegistrationConfig::default();
    let r = register_with_correspondences(&a, &b, &matches, &RigidTransform::identity(), &cfg).unwrap();
    eprintln!("converged={} iterations={}", r.converged, r.iterations);
    for t in &r.trace {
        eprintln!(
            "it {:3}  obj {:10.4}  sigma {:.5}  beta {:.6}  prior {:.3}",
            t.iteration, t.objective, t.sigma, t.beta, t.inlier_prior
        );
    }
}
