use madrom::diffcore as fdcheck;
use madrom::network::{init_weights, NetworkConfig};
use madrom::problems::{OdeProblem, ProblemInstance};
use madrom::training::*;

fn ode(eta: f64) -> ProblemInstance {
    ProblemInstance::Ode(OdeProblem::new(eta).unwrap())
}

fn net(latent_dim: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        width: 8,
        spatial_dim: 1,
        output_dim: 1,
        latent_dim,
        ..NetworkConfig::default()
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        interior_samples: 16,
        boundary_samples: 2,
        pretrain_iters: 6,
        finetune_iters: 6,
        lr: 1e-2,
        eval_every: 2,
        strict: true,
        threads: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn single_instance_pretraining_is_plain_training() {
    let c = cfg();
    let (model, trace) = pretrain(&c, &net(0), &[ode(0.5)]).unwrap();
    let plain = from_scratch(&c, &net(0), &ode(0.5), None).unwrap();
    assert_eq!(model.weights, plain.weights);
    let a: Vec<f64> = trace.rows.iter().map(|r| r.loss).collect();
    let b: Vec<f64> = plain.trace.rows.iter().map(|r| r.loss).collect();
    assert_eq!(a, b);
}

#[test]
fn zero_budget_returns_initial_state() {
    let mut c = cfg();
    c.pretrain_iters = 0;
    c.finetune_iters = 0;
    let (model, trace) = pretrain(&c, &net(2), &[ode(0.0), ode(1.0)]).unwrap();
    assert_eq!(model.weights, init_weights(&net(2), c.seed).unwrap());
    assert_eq!(trace.rows.len(), 1);
    assert_eq!(model.manifest.iterations, 0);
    let ft = finetune(&c, &model, &ode(0.5), FinetuneMode::LatentAndWeights, None).unwrap();
    assert_eq!(ft.weights, model.weights);
    assert_eq!(ft.trace.rows.len(), 1);
}

#[test]
fn latent_only_finetune_leaves_weights_untouched() {
    let c = cfg();
    let (model, _) = pretrain(&c, &net(2), &[ode(0.0), ode(1.0)]).unwrap();
    let before = model.weights.digest();
    let ft = finetune(&c, &model, &ode(0.4), FinetuneMode::LatentOnly, None).unwrap();
    assert_eq!(ft.weights.digest(), before);
    assert_eq!(model.weights.digest(), before);
    assert_ne!(ft.latent.components, model.bank.latents[0]);

    let lm = finetune(&c, &model, &ode(0.4), FinetuneMode::LatentAndWeights, None).unwrap();
    assert_ne!(lm.weights.digest(), before);
}

#[test]
fn nearest_descriptor_initializes_latent() {
    let c = cfg();
    let (model, _) = pretrain(&c, &net(2), &[ode(0.0), ode(1.0), ode(2.0)]).unwrap();
    let z = latent_init(&model, &ode(1.2)).unwrap();
    assert_eq!(z.components, model.bank.latents[1]);
    // equidistant: lowest index wins
    let z = latent_init(&model, &ode(0.5)).unwrap();
    assert_eq!(z.components, model.bank.latents[0]);
}

#[test]
fn reptile_meta_step_extremes() {
    let mut c = cfg();
    c.milestones.clear();
    c.reptile_meta_step = 0.0;
    let w0 = init_weights(&net(0), c.seed).unwrap();
    let frozen = reptile_pretrain(&c, &net(0), &[ode(0.0), ode(1.0)]).unwrap();
    assert_eq!(frozen.weights, w0);

    // one meta step with ε = 1 lands on the task-trained weights
    c.reptile_meta_step = 1.0;
    c.pretrain_iters = 1;
    c.reptile_inner_steps = 5;
    let meta = reptile_pretrain(&c, &net(0), &[ode(0.7)]).unwrap();
    let direct = train_weights(&c, w0, &[], &ode(0.7), 5, None, "direct").unwrap();
    assert_eq!(meta.weights, direct.weights);
}

#[test]
fn transfer_trace_marks_phases() {
    let c = cfg();
    let out = transfer_learning(&c, &net(3), &ode(0.0), &ode(1.0), None).unwrap();
    assert_eq!(out.trace.rows_in_phase("source").count(), c.pretrain_iters + 1);
    assert_eq!(out.trace.rows_in_phase("target").count(), c.finetune_iters + 1);
    assert_eq!(out.weights.config.latent_dim, 0);
}

#[test]
fn strict_runs_are_reproducible() {
    let c = cfg();
    let run = || {
        let (m, t) = pretrain(&c, &net(2), &[ode(0.0), ode(1.0), ode(2.0)]).unwrap();
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        (m, csv)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let mut other = c.clone();
    other.seed = 1;
    let (d, _) = pretrain(&other, &net(2), &[ode(0.0), ode(1.0), ode(2.0)]).unwrap();
    assert_ne!(a.weights, d.weights);
}

#[test]
fn threaded_pretraining_matches_serial() {
    let c = cfg();
    let tasks: Vec<_> = (0..5).map(|i| ode(i as f64 * 0.5)).collect();
    let (serial, _) = pretrain(&c, &net(2), &tasks).unwrap();
    let mut t = c.clone();
    t.threads = 3;
    let (threaded, _) = pretrain(&t, &net(2), &tasks).unwrap();
    assert_eq!(serial.weights, threaded.weights);
    assert_eq!(serial.bank, threaded.bank);
}

#[test]
fn trainer_gradient_matches_finite_differences() {
    let inst = ode(0.3);
    let w = init_weights(&net(2), 4).unwrap();
    let z = vec![0.2, -0.1];
    let mut rng = stream_rng(9, 0);
    let b = Batch::sample(&inst, &mut rng, 12, 2);
    let settings = cfg().loss_settings();
    let pen = Some(0.5);
    let le = physics_loss_fast(&w, &z, &inst, &b, settings, pen, true, true).unwrap();
    let mut flat = w.flatten();
    flat.extend_from_slice(&z);
    let nw = w.num_params();
    let f = |p: &[f64]| {
        let ww = madrom::network::NetworkWeights::from_flat(&w.config, &p[..nw]).unwrap();
        physics_loss_fast(&ww, &p[nw..], &inst, &b, settings, pen, false, false)
            .unwrap()
            .loss
    };
    let mut analytic = le.weight_grad.unwrap();
    analytic.extend_from_slice(&le.latent_grad);
    let report = fdcheck::finite_diff_check(f, &flat, 1e-6, &analytic, 1e-6);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn family_mismatch_is_an_error() {
    let c = cfg();
    let (model, _) = pretrain(&c, &net(2), &[ode(0.0)]).unwrap();
    let lap = madrom::problems::InstanceSpec::Laplace {
        domain: madrom::problems::LaplaceDomain::Ellipse(madrom::problems::Ellipse::new([0.0, 0.0], [0.5, 0.4], 0.0).unwrap()),
        h: madrom::problems::FourierSeries::zero(std::f64::consts::TAU, 2),
    }
    .build()
    .unwrap();
    assert!(finetune(&c, &model, &lap, FinetuneMode::LatentOnly, None).is_err());
}
