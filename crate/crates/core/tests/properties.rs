mod common;

use common::*;
use gaxnet::channel;
use gaxnet::config::Config;
use gaxnet::env::{Action, UavEnv};
use gaxnet::nn::Tensor;
use gaxnet::policy::{route_messages, ExchangeMode, PolicyMode, Team};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn team(cfg: &Config, seed: u64) -> Team {
    Team::new(&cfg.actor().unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_weights_and_semantics_are_probabilities(seed in 0u64..1000) {
        let cfg = production_config(PolicyMode::Gaxnet, ExchangeMode::Semantic);
        let team = team(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n = team.actors.len();
        let obs: Vec<Tensor> = (0..n).map(|_| random_obs(&mut rng, 3, n)).collect();
        let step = team.forward_step(&team.initial_state(3), &obs).unwrap();
        let step = team.forward_step(&step.next, &obs).unwrap();
        for out in &step.outputs {
            for r in 0..3 {
                let w = out.weights.row(r);
                prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(out.sr.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn agents_stay_on_the_grid(seed in 0u64..1000, actions in prop::collection::vec(0usize..8, 80)) {
        let cfg = Config::default().env().unwrap();
        let mut env = UavEnv::new(cfg.clone()).unwrap();
        env.reset(seed).unwrap();
        for chunk in actions.chunks(4) {
            let a: Vec<Action> = chunk.iter().map(|&i| Action::new(i).unwrap()).collect();
            let res = env.step(&a).unwrap();
            for p in &env.world().agents {
                prop_assert!(p.iter().all(|&c| (0.0..=cfg.grid_side).contains(&c)));
            }
            let c = cfg.center();
            let t = env.world().target;
            prop_assert!(((t[0] - c[0]).powi(2) + (t[1] - c[1]).powi(2)).sqrt() <= cfg.target_containment + 1e-9);
            prop_assert_eq!(res.info.collisions.len(), 4);
            for i in 0..4 {
                prop_assert!(!res.info.collisions[i][i]);
                for j in 0..4 {
                    prop_assert_eq!(res.info.collisions[i][j], res.info.collisions[j][i]);
                }
            }
        }
        prop_assert!(env.is_done());
    }

    #[test]
    fn error_rate_grows_with_distance_and_shrinks_with_time(d in 0.0f64..30000.0, dd in 1.0f64..2000.0, t in 5e-6f64..1e-4) {
        let p = Config::default().channel();
        let s0 = channel::snr(d, p.altitude, &p).unwrap();
        let s1 = channel::snr(d + dd, p.altitude, &p).unwrap();
        prop_assert!(s1 < s0);
        let e0 = channel::error_rate(s0, t, &p).unwrap();
        prop_assert!(channel::error_rate(s1, t, &p).unwrap() >= e0);
        prop_assert!(channel::error_rate(s0, t * 1.5, &p).unwrap() <= e0);
        prop_assert!((0.0..=1.0).contains(&e0));
    }

    #[test]
    fn q_inverse_round_trips(x in -6.0f64..6.0) {
        let back = channel::q_function_inv(channel::q_function(x)).unwrap();
        prop_assert!((back - x).abs() < 1e-6);
    }

    #[test]
    fn min_latency_meets_the_target_exactly(d in 0.0f64..15000.0) {
        let cfg = Config::default();
        let p = cfg.channel();
        let s = channel::snr(d, p.altitude, &p).unwrap();
        let t = channel::min_latency(s, cfg.target_error, &p).unwrap().unwrap();
        let e = channel::error_rate(s, t, &p).unwrap();
        prop_assert!((e - cfg.target_error).abs() <= 1e-6 * cfg.target_error);
    }

    #[test]
    fn routing_twice_is_identity(vals in prop::collection::vec(-1.0f64..1.0, 12)) {
        let out: Vec<Tensor> = vals.chunks(3).map(|c| Tensor::row_vector(c.to_vec())).collect();
        let back = route_messages(&route_messages(&out).unwrap()).unwrap();
        prop_assert_eq!(back, out);
    }

    #[test]
    fn config_toml_round_trips(seed in 0..=i64::MAX as u64, iterations in 1u64..10_000, lr in 1e-6f64..1e-2) {
        let cfg = Config { seed, iterations, lr_gaxnet: lr, ..Config::default() };
        prop_assert!(cfg.validate().is_ok());
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back.config_hash(), cfg.config_hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn seeds_beyond_the_toml_integer_range_are_rejected() {
    let cfg = Config {
        seed: i64::MAX as u64 + 1,
        ..Config::default()
    };
    assert!(cfg.validate().is_err());
}
