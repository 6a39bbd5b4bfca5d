//! Property tests over the public API: transform monotonicity and inversion,
//! grid shape, stream determinism, kernel normalization.

use std::sync::Arc;

use dynbridge::kernels::TransitionKernel;
use dynbridge::model::{self, CoeffSpec, Scenario};
use dynbridge::quad::simpson;
use dynbridge::rng::{NodeStream, Tag};
use dynbridge::simulate::{Refinement, TimeGrid};
use dynbridge::transform::SpaceTransform;
use proptest::prelude::*;

fn transform(s: Scenario) -> SpaceTransform {
    SpaceTransform::new(Arc::new(s.build().unwrap())).unwrap()
}

fn families() -> Vec<Scenario> {
    let mut tanh = Scenario::back_pedersen();
    tanh.coefficient = CoeffSpec::TanhBump { base: 1.0, amp: 0.4 };
    vec![Scenario::back_pedersen(), Scenario::sqrt_quadratic(), tanh]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn space_transform_is_increasing(t in 0.0f64..1.0, x in -4.0f64..4.0, dx in 1e-3f64..2.0, which in 0usize..3) {
        let tr = transform(families().swap_remove(which));
        prop_assert!(tr.eval_a(t, x).unwrap() < tr.eval_a(t, x + dx).unwrap());
    }

    #[test]
    fn space_transform_round_trips(t in 0.0f64..1.0, x in -4.0f64..4.0, which in 0usize..3) {
        let tr = transform(families().swap_remove(which));
        let u = tr.eval_a(t, x).unwrap();
        prop_assert!((tr.eval_a_inv(t, u).unwrap() - x).abs() < 1e-9);
        prop_assert!((tr.eval_a(t, tr.eval_a_inv(t, u).unwrap()).unwrap() - u).abs() < 1e-9);
    }

    #[test]
    fn volatility_equation_holds_for_ready_families(t in 0.0f64..1.0, z in -3.0f64..3.0) {
        let m = Scenario::sqrt_quadratic().build().unwrap();
        prop_assert!(model::pde_residual(&m.coeff, t, z).abs() < 1e-8);
    }

    #[test]
    fn grids_increase_to_the_cutoff(steps in 16usize..3000, log_eps in -5.0f64..-1.5, geometric in any::<bool>()) {
        let eps = 10f64.powf(log_eps);
        let g = if geometric { TimeGrid::geometric(steps, eps) } else { TimeGrid::uniform(steps, eps) }.unwrap();
        prop_assert_eq!(g.nodes[0], 0.0);
        prop_assert!(g.nodes.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((g.end() - (1.0 - eps)).abs() < 1e-15);
        if let Refinement::Geometric { switch, ratio } = g.refinement {
            for w in g.nodes.windows(2).filter(|w| w[0] >= switch && w[1] < g.end()) {
                prop_assert!(((1.0 - w[1]) / (1.0 - w[0]) - ratio).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn streams_are_reproducible_and_positionable(seed in any::<u64>(), path in 0u64..1_000_000, node in 0u64..64) {
        let mut a = NodeStream::new(seed, path, Tag::Signal);
        for _ in 0..node {
            a.pair();
        }
        let mut b = NodeStream::at(seed, path, node, Tag::Signal);
        prop_assert_eq!(a.pair(), b.pair());
        let mut other = NodeStream::new(seed, path, Tag::Noise);
        prop_assert_ne!(NodeStream::new(seed, path, Tag::Signal).pair(), other.pair());
    }

    #[test]
    fn kernel_integrates_to_one(t in 0.0f64..0.8, gap in 0.01f64..0.2, x in -2.0f64..2.0) {
        let k = TransitionKernel::for_model(Scenario::sqrt_quadratic().build().unwrap()).unwrap();
        let u = t + gap;
        // integrate over y = A(u,z), where dz = a(u,z) dy
        let tr = k.transform();
        let m = k.model();
        let centre = tr.eval_a(t, x).unwrap();
        let half = 12.0 * gap.sqrt() + 1.0;
        let mass = simpson(
            |y| {
                let z = tr.eval_a_inv(u, y).unwrap();
                k.g(t, x, u, z).unwrap() * m.a(u, z)
            },
            centre - half,
            centre + half,
            4000,
        );
        prop_assert!((mass - 1.0).abs() < 1e-6, "mass {}", mass);
    }
}

#[test]
fn scenario_files_round_trip() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let s = Scenario::from_toml(&text).unwrap();
        assert_eq!(Scenario::from_toml(&s.to_toml().unwrap()).unwrap(), s, "{}", path.display());
        s.build().unwrap();
        seen += 1;
    }
    assert!(seen >= 4);
}
