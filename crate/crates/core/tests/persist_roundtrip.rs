use madrom::network::{init_weights, NetworkConfig, PeriodicEmbedding};
use madrom::persist::{self, PersistError};
use madrom::problems::{ConvexPolygon, Ellipse, Family, FourierSeries, InstanceSpec, LaplaceDomain};
use madrom::training::{LatentBank, Manifest, PretrainedModel, RunStatus, TrainConfig};
use madrom::Error;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(f64::MAX), Just(1e-300)]
}

fn series() -> impl Strategy<Value = FourierSeries> {
    (0usize..5, finite(), prop::collection::vec(finite(), 10)).prop_map(|(k, a0, c)| FourierSeries {
        period: 1.0,
        a0,
        cos: c[..k].to_vec(),
        sin: c[5..5 + k].to_vec(),
    })
}

fn instance() -> impl Strategy<Value = InstanceSpec> {
    prop_oneof![
        finite().prop_map(|eta| InstanceSpec::Ode { eta }),
        (series(), 1e-4..1.0f64, any::<bool>()).prop_map(|(u0, nu, heterogeneous)| InstanceSpec::Burgers {
            u0,
            nu,
            heterogeneous
        }),
        (series(), prop::collection::vec((finite(), finite()), 3..8)).prop_map(|(h, v)| InstanceSpec::Laplace {
            domain: LaplaceDomain::Polygon(ConvexPolygon {
                vertices: v.into_iter().map(|(a, b)| [a, b]).collect()
            }),
            h
        }),
        (series(), -0.2..0.2f64, 0.3..0.5f64, 0.0..3.0f64).prop_map(|(h, c, a, r)| InstanceSpec::Laplace {
            domain: LaplaceDomain::Ellipse(Ellipse {
                center: [c, -c],
                semi_axes: [a, a * 0.8],
                rotation: r
            }),
            h
        }),
    ]
}

fn model_strategy() -> impl Strategy<Value = PretrainedModel> {
    (
        2usize..4,
        1usize..6,
        0usize..3,
        any::<u64>(),
        prop::collection::vec(instance(), 1..4),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_flat_map(|(depth, width, n, seed, instances, periodic, diverged)| {
            let count = instances.len();
            (
                Just((depth, width, n, seed, instances, periodic, diverged)),
                prop::collection::vec(prop::collection::vec(finite(), n), count),
                prop::collection::vec(prop::collection::vec(finite(), 2), count),
            )
        })
        .prop_map(|((depth, width, n, seed, instances, periodic, diverged), latents, descs)| {
            let config = NetworkConfig {
                depth,
                width,
                spatial_dim: 2,
                output_dim: 1,
                latent_dim: n,
                periodic_embedding: periodic.then_some(PeriodicEmbedding { coordinate: 0, period: 1.0 }),
                ..NetworkConfig::default()
            };
            PretrainedModel {
                weights: init_weights(&config, seed).unwrap(),
                bank: LatentBank {
                    dim: n,
                    latents,
                    descriptors: (!periodic).then_some(descs),
                },
                family: Family::Laplace,
                instances,
                manifest: Manifest {
                    train: TrainConfig {
                        seed,
                        lr_latent: periodic.then_some(0.5),
                        ..TrainConfig::default()
                    },
                    seed,
                    iterations: (seed % 1000) as usize,
                    status: if diverged {
                        RunStatus::Diverged { iteration: 3 }
                    } else {
                        RunStatus::Completed
                    },
                    code_version: "0.1.0".into(),
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_round_trip_is_bit_exact(m in model_strategy()) {
        let bytes = persist::encode_model(&m).unwrap();
        let back = persist::decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.weights.digest(), m.weights.digest());
        prop_assert_eq!(persist::encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn instance_list_round_trip(specs in prop::collection::vec(instance(), 0..6)) {
        let bytes = persist::encode_instances(&specs).unwrap();
        prop_assert_eq!(persist::decode_instances(&bytes).unwrap(), specs);
    }

    #[test]
    fn any_single_bit_flip_is_detected(m in model_strategy(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = persist::encode_model(&m).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(persist::decode_model(&bytes).is_err());
    }

    #[test]
    fn truncation_is_detected(m in model_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = persist::encode_model(&m).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(persist::decode_model(&bytes[..n]).is_err());
    }
}

#[test]
fn weights_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig {
        depth: 4,
        width: 6,
        spatial_dim: 2,
        latent_dim: 3,
        insert_latent_at: Some(2),
        ..NetworkConfig::default()
    };
    let w = init_weights(&cfg, 11).unwrap();
    let p = dir.path().join("w.bin");
    persist::save_weights(&w, &p).unwrap();
    assert_eq!(persist::load_weights(&p).unwrap(), w);
    // overwrite in place
    let w2 = init_weights(&cfg, 12).unwrap();
    persist::save_weights(&w2, &p).unwrap();
    assert_eq!(persist::load_weights(&p).unwrap(), w2);
}

#[test]
fn future_version_is_refused_with_message() {
    let cfg = NetworkConfig {
        depth: 2,
        width: 2,
        spatial_dim: 1,
        latent_dim: 0,
        ..NetworkConfig::default()
    };
    let mut bytes = persist::encode_weights(&init_weights(&cfg, 0).unwrap()).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    match persist::decode_weights(&bytes) {
        Err(Error::Persist(PersistError::Version { found: 7, expected })) => assert_eq!(expected, persist::VERSION),
        other => panic!("unexpected {other:?}"),
    }
}
