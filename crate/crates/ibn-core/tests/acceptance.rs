//! The ten exit-gate checks for this workspace, one test per criterion.
//! Each prints a single machine-greppable verdict line
//! (`ACCEPTANCE <n> <name>: PASS|FAIL`) before asserting, so a red run
//! still reports every verdict it reached. Run with
//! `cargo test --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.
//!
//! Criteria 7 and 9 share one trained desk-scale experiment (the slow
//! part); it runs once behind a lock no matter which test gets there
//! first.
//!
//! Criterion 8 is currently red on the bundled synthetic generator;
//! its doc comment and the README carry the analysis.

use ibn_core::ablate::{mean_mae_by_variant, run_ablation, variants};
use ibn_core::data::synthetic::{generate_synthetic, SynthParams};
use ibn_core::data::{prepare_dataset, Dataset};
use ibn_core::diagnostics::uncertainty_diagnostics;
use ibn_core::graph::{
    adaptive_adjacency_tape, build_predefined, gaussian_adjacency, pairwise_euclidean,
};
use ibn_core::imputation::{uai_combine, uai_forward, UaiConfig};
use ibn_core::model::{
    ibn_cell_step, run_ru, CellHooks, Direction, ForecastModel, ModelConfig,
};
use ibn_core::optim::AdamConfig;
use ibn_core::params::{Binder, ParamId};
use ibn_core::rng::{stream, DropoutKey, DropoutStreams, Purpose};
use ibn_core::testing::rel_err;
use ibn_core::train::{
    evaluate, history_equivalent, lvcf_baseline, restore_best, train, train_mean_baseline,
    train_session, TrainConfig, TrainSession,
};
use ibn_core::{Tape, Tensor};
use rand::Rng;
use std::sync::OnceLock;
use std::time::Instant;

/// Print the verdict line, then enforce it.
fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {number} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {number} {name}: {detail}");
}

/// Small bidirectional model with a couple of masked variables; big
/// enough to exercise every code path, small enough to train in seconds.
fn tiny_setup(seed: u64) -> (ModelConfig, Dataset, Tensor) {
    let synth = generate_synthetic(
        6,
        160,
        seed,
        &SynthParams {
            noise_std: 0.05,
            ..SynthParams::default()
        },
    )
    .unwrap();
    let cfg = ModelConfig {
        n: 6,
        h: 6,
        l: 2,
        c: 1,
        d: 6,
        embed_dim: 4,
        p: 0.1,
        s: 4,
        ..ModelConfig::default()
    };
    let data = prepare_dataset(&synth.series, cfg.h, cfg.l, 0.34, seed).unwrap();
    (cfg, data, synth.adjacency)
}

fn tiny_train_cfg(seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig::default(),
        batch_size: 16,
        max_epochs,
        patience: 15,
        seed,
    }
}

#[test]
fn criterion_01_end_to_end_gradients_match_finite_differences() {
    let start = Instant::now();
    let synth = generate_synthetic(4, 100, 11, &SynthParams::default()).unwrap();
    let cfg = ModelConfig {
        n: 4,
        h: 6,
        l: 3,
        c: 1,
        d: 8,
        embed_dim: 4,
        p: 0.1,
        s: 3,
        ..ModelConfig::default()
    };
    let data = prepare_dataset(&synth.series, cfg.h, cfg.l, 0.3, 11).unwrap();
    let w = &data.train.windows[0];
    let mut model = ForecastModel::new(cfg, Default::default(), synth.adjacency, 11).unwrap();
    // evaluation streams draw the same dropout masks on every call, so
    // the loss is a fixed deterministic function of the parameters
    let streams = DropoutStreams::eval(11, 0);

    // squared error keeps the scalar smooth end to end; the absolute
    // error used for training has kinks where a difference oracle and a
    // subgradient convention can legitimately disagree
    let loss_of = |model: &ForecastModel| -> f64 {
        let mut pass = model.forward(&w.x, &data.mask, &streams).unwrap();
        let y = pass.tape.constant(w.y.clone());
        let diff = pass.tape.sub(pass.y_hat, y).unwrap();
        let sq = pass.tape.mul(diff, diff).unwrap();
        let loss = pass.tape.mean(sq);
        pass.tape.value(loss).scalar_value()
    };

    let analytic: Vec<Tensor> = {
        let mut pass = model.forward(&w.x, &data.mask, &streams).unwrap();
        let y = pass.tape.constant(w.y.clone());
        let diff = pass.tape.sub(pass.y_hat, y).unwrap();
        let sq = pass.tape.mul(diff, diff).unwrap();
        let loss = pass.tape.mean(sq);
        let bound = pass.binder.bound_vars();
        let leaves: Vec<_> = bound.iter().map(|&(_, var)| var).collect();
        let grad_map = pass.tape.backward(loss, &leaves).unwrap();
        let mut grads: Vec<Tensor> = model
            .store
            .iter()
            .map(|(_, _, value)| Tensor::zeros(value.shape()))
            .collect();
        for (pid, var) in bound {
            if let Some(g) = grad_map.get(&var) {
                grads[pid.0] = g.clone();
            }
        }
        grads
    };

    let names: Vec<String> = model
        .store
        .iter()
        .map(|(_, name, _)| name.to_string())
        .collect();
    let n_params = names.len();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for i in 0..n_params {
        let numel = analytic[i].numel();
        for j in 0..numel {
            let orig = model.store.value(ParamId(i)).data()[j];
            model.store.value_mut(ParamId(i)).data_mut()[j] = orig + h;
            let fp = loss_of(&model);
            model.store.value_mut(ParamId(i)).data_mut()[j] = orig - h;
            let fm = loss_of(&model);
            model.store.value_mut(ParamId(i)).data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[i].data()[j], fd);
            if err > worst {
                worst = err;
                worst_at = format!("{}[{}]", names[i], j);
            }
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient-correctness",
        worst < 1e-4 && elapsed < 60.0,
        &format!(
            "{checked} parameter coordinates, max rel err {worst:.2e} at {worst_at}, {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_02_every_adjacency_construction_is_row_stochastic() {
    let mut rng = stream(2, Purpose::Synthetic, &[0xacce]);
    let n = 9;
    let mut worst = 0.0f64;
    let check_rows = |a: &Tensor, worst: &mut f64| {
        let rows = a.shape()[0];
        let cols = a.shape()[1];
        for i in 0..rows {
            let sum: f64 = (0..cols).map(|j| a.get2(i, j)).sum();
            let dev = (sum - 1.0).abs();
            if dev > *worst {
                *worst = dev;
            }
        }
    };

    for trial in 0..100u64 {
        let pts: Vec<f64> = (0..n * 2).map(|_| rng.gen::<f64>() * 3.0).collect();
        let coords = Tensor::new(vec![n, 2], pts).unwrap();
        let dist = pairwise_euclidean(&coords).unwrap();

        let gamma = 0.2 + rng.gen::<f64>() * 1.5;
        let a_gau = gaussian_adjacency(&dist, gamma).unwrap();
        check_rows(&a_gau, &mut worst);

        let threshold = 0.2 + rng.gen::<f64>();
        let a_pre = build_predefined(&coords, threshold).unwrap();
        check_rows(&a_pre, &mut worst);

        let mut tape = Tape::new();
        let e1: Vec<f64> = (0..n * 4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let e2: Vec<f64> = (0..n * 4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let e1 = tape.constant(Tensor::new(vec![n, 4], e1).unwrap());
        let e2 = tape.constant(Tensor::new(vec![n, 4], e2).unwrap());
        let a_adp = adaptive_adjacency_tape(&mut tape, e1, e2).unwrap();
        check_rows(tape.value(a_adp), &mut worst);
        let _ = trial;
    }
    verdict(
        2,
        "row-stochasticity",
        worst < 1e-6,
        &format!("300 matrices, worst row-sum deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_03_uncertainty_weighting_contract() {
    // no dropout: sigma is an exact zero and the weighted output is the
    // mean untouched, no floating-point residue allowed
    let mut tape = Tape::new();
    let mut rng = stream(3, Purpose::Synthetic, &[0xacce]);
    let x: Vec<f64> = (0..5 * 4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let w: Vec<f64> = (0..4 * 4).map(|_| rng.gen::<f64>() - 0.5).collect();
    let x = tape.constant(Tensor::new(vec![5, 4], x).unwrap());
    let w = tape.leaf(Tensor::new(vec![4, 4], w).unwrap());
    let b = tape.leaf(Tensor::zeros(&[4]));
    let cfg = UaiConfig {
        p: 0.0,
        s: 6,
        deterministic: false,
    };
    let key = DropoutKey {
        layer: 1,
        direction: 0,
        step: 1,
        sample: 0,
        gate: 0,
    };
    let out = uai_forward(
        &mut tape,
        x,
        w,
        b,
        &cfg,
        &DropoutStreams::eval(3, 0),
        key,
    )
    .unwrap();
    let sigma_zero = tape.value(out.sigma).data().iter().all(|&v| v == 0.0);
    let mu = tape.value(out.mu).data().to_vec();
    let x_hat = tape.value(out.x_hat).data().to_vec();
    let exact = mu
        .iter()
        .zip(&x_hat)
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // fixed positive mean: the weighted value strictly shrinks as the
    // spread grows
    let mut tape = Tape::new();
    let mu_c = tape.constant(Tensor::new(vec![1, 1], vec![1.3]).unwrap());
    let mut previous = f64::INFINITY;
    let mut strictly_decreasing = true;
    for step in 0..9 {
        let sigma_v = 0.25 * step as f64;
        let sigma_c = tape.constant(Tensor::new(vec![1, 1], vec![sigma_v]).unwrap());
        let combined = uai_combine(&mut tape, mu_c, sigma_c).unwrap();
        let value = tape.value(combined).scalar_value();
        if value >= previous {
            strictly_decreasing = false;
        }
        previous = value;
    }

    verdict(
        3,
        "uncertainty-weighting",
        sigma_zero && exact && strictly_decreasing,
        &format!(
            "p=0 sigma all zero: {sigma_zero}, output==mean bitwise: {exact}, \
             strictly decreasing over 9 sigma values: {strictly_decreasing}"
        ),
    );
}

#[test]
fn criterion_04_forced_gates_reduce_to_identities() {
    let (cfg, data, a_pre) = tiny_setup(4);
    let model = ForecastModel::new(cfg, Default::default(), a_pre, 4).unwrap();
    let uai = UaiConfig {
        p: 0.1,
        s: 4,
        deterministic: false,
    };
    let streams = DropoutStreams::eval(4, 0);
    let mut rng = stream(4, Purpose::Synthetic, &[0xacce]);

    let run = |hooks: CellHooks, rng: &mut dyn rand::RngCore| {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x: Vec<f64> = (0..cfg.n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let c: Vec<f64> = (0..cfg.n * cfg.d)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let x_t = tape.constant(Tensor::new(vec![cfg.n, 1], x).unwrap());
        let c_prev = tape.constant(Tensor::new(vec![cfg.n, cfg.d], c).unwrap());
        let a_pre_var = tape.constant(model.a_pre.clone());
        let (h_t, c_t, info) = ibn_cell_step(
            &mut tape,
            &mut binder,
            &model.store,
            x_t,
            &data.mask,
            c_prev,
            &model.layer1_fwd,
            a_pre_var,
            &uai,
            &streams,
            1,
            &hooks,
        )
        .unwrap();
        (
            tape.value(c_prev).clone(),
            tape.value(c_t).clone(),
            tape.value(h_t).clone(),
            tape.value(info.u).clone(),
        )
    };

    let (c_prev, c_t, _, _) = run(
        CellHooks {
            force_f: Some(1.0),
            force_r: None,
        },
        &mut rng,
    );
    let memory_held = c_prev
        .data()
        .iter()
        .zip(c_t.data())
        .all(|(a, b)| a == b);

    let (_, _, h_t, u) = run(
        CellHooks {
            force_f: None,
            force_r: Some(0.0),
        },
        &mut rng,
    );
    let passthrough = h_t.data().iter().zip(u.data()).all(|(a, b)| a == b);

    verdict(
        4,
        "gate-identities",
        memory_held && passthrough,
        &format!(
            "forget gate pinned to 1 keeps cell state exactly: {memory_held}, \
             update gate pinned to 0 passes the reconstructed input exactly: {passthrough}"
        ),
    );
}

#[test]
fn criterion_05_direction_is_a_relabeling_of_time() {
    let (cfg, data, a_pre) = tiny_setup(5);
    let model = ForecastModel::new(cfg, Default::default(), a_pre, 5).unwrap();
    let uai = UaiConfig {
        p: 0.1,
        s: 4,
        deterministic: false,
    };
    let streams = DropoutStreams::eval(5, 0);
    let w = &data.train.windows[0];
    let h = cfg.h;

    // per-step inputs in original order and reversed order
    let step_values: Vec<Tensor> = (0..h)
        .map(|t| {
            let mut step = Tensor::zeros(&[cfg.n, 1]);
            for v in 0..cfg.n {
                step.data_mut()[v] = w.x.data()[v * h + t];
            }
            step
        })
        .collect();

    let run = |values: &[Tensor], direction: Direction| -> Vec<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let seq: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let a_pre_var = tape.constant(model.a_pre.clone());
        let (hiddens, _) = run_ru(
            &mut tape,
            &mut binder,
            &model.store,
            &seq,
            &data.mask,
            &model.layer1_fwd,
            a_pre_var,
            &uai,
            &streams,
            direction,
        )
        .unwrap();
        hiddens.iter().map(|&id| tape.value(id).clone()).collect()
    };

    let backward_on_original = run(&step_values, Direction::Backward);
    let reversed: Vec<Tensor> = step_values.iter().rev().cloned().collect();
    let forward_on_reversed = run(&reversed, Direction::Forward);

    let mut exact = true;
    for k in 0..h {
        let a = &forward_on_reversed[k];
        let b = &backward_on_original[h - 1 - k];
        if !a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
        {
            exact = false;
        }
    }
    verdict(
        5,
        "bidirectional-symmetry",
        exact,
        &format!("{h} steps, tied parameters and substreams, bit-exact reversal: {exact}"),
    );
}

#[test]
fn criterion_06_identical_seeds_are_bit_identical() {
    let one_run = |dir: &std::path::Path| {
        let (cfg, data, a_pre) = tiny_setup(6);
        let mut model = ForecastModel::new(cfg, Default::default(), a_pre, 6).unwrap();
        let tc = tiny_train_cfg(6, 3);
        let mut session = TrainSession::new(&model);
        train_session(&mut model, &data, &tc, &mut session, None).unwrap();
        restore_best(&mut model, &session).unwrap();
        ibn_core::checkpoint::save_checkpoint(dir, &model, Some(&session)).unwrap();
        let report = evaluate(&model, &data.test, &data.mask, &data.scaler, 6).unwrap();
        (session.history, serde_json::to_string(&report).unwrap())
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (history_a, report_a) = one_run(dir_a.path());
    let (history_b, report_b) = one_run(dir_b.path());

    let histories_match = history_equivalent(&history_a, &history_b);
    let reports_match = report_a == report_b;
    // train_state.json embeds wall-clock epoch durations, the one field
    // determinism never covers; every other artifact must match byte
    // for byte
    let mut files_match = true;
    for file in [
        "manifest.json",
        "weights.bin",
        "best_weights.bin",
        "optimizer.bin",
        "a_pre.bin",
    ] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        if a != b {
            files_match = false;
        }
    }
    verdict(
        6,
        "determinism",
        histories_match && reports_match && files_match,
        &format!(
            "history equivalent: {histories_match}, eval report identical: {reports_match}, \
             checkpoint bytes identical: {files_match}"
        ),
    );
}

/// Shared desk-scale experiment: one trained model on the standard
/// synthetic setting, with baselines and uncertainty diagnostics.
struct DeskRun {
    epochs: usize,
    seconds: f64,
    test_mae: f64,
    lvcf_mae: f64,
    train_mean_mae: f64,
    spearman: Option<f64>,
    diagnostic_rows: usize,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_run() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let start = Instant::now();
        let synth = generate_synthetic(12, 2000, 7, &SynthParams::default()).unwrap();
        let cfg = ModelConfig {
            n: 12,
            h: 8,
            l: 3,
            c: 1,
            d: 12,
            embed_dim: 6,
            p: 0.1,
            s: 10,
            ..ModelConfig::default()
        };
        let data = prepare_dataset(&synth.series, cfg.h, cfg.l, 0.5, 7).unwrap();
        let mut model = ForecastModel::new(cfg, Default::default(), synth.adjacency, 7).unwrap();
        let tc = TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 30,
            patience: 10,
            seed: 7,
        };
        let history = train(&mut model, &data, &tc).unwrap();
        let report = evaluate(&model, &data.test, &data.mask, &data.scaler, 7).unwrap();
        let lvcf = lvcf_baseline(&data.test, &data.scaler).unwrap();
        let mean_baseline = train_mean_baseline(&data.test, &data.scaler).unwrap();
        let (rows, spearman) =
            uncertainty_diagnostics(&model, &data.test, &data.mask, 7).unwrap();
        DeskRun {
            epochs: history.len(),
            seconds: start.elapsed().as_secs_f64(),
            test_mae: report.mae,
            lvcf_mae: lvcf.mae,
            train_mean_mae: mean_baseline.mae,
            spearman,
            diagnostic_rows: rows.len(),
        }
    })
}

#[test]
fn criterion_07_desk_scale_model_beats_both_baselines() {
    let run = desk_run();
    let pass = run.epochs <= 200
        && run.seconds < 600.0
        && run.test_mae < run.lvcf_mae
        && run.test_mae < run.train_mean_mae;
    verdict(
        7,
        "desk-scale-learning",
        pass,
        &format!(
            "{} epochs in {:.0}s; test MAE {:.4} vs last-value {:.4} and train-mean {:.4}",
            run.epochs, run.seconds, run.test_mae, run.lvcf_mae, run.train_mean_mae
        ),
    );
}

/// Known red on the bundled synthetic generator: its graph is static
/// and its dynamics stationary, so the learned-adaptive-graph variant
/// (`ggcn_to_agcn`) converges to the true structure while the full
/// model's value-dependent kernel works from half-masked inputs. The
/// verdict line reports the per-variant means either way; README
/// carries the analysis.
#[test]
fn criterion_08_removing_any_component_does_not_help() {
    let cfg = ModelConfig {
        n: 12,
        h: 8,
        l: 3,
        c: 1,
        d: 12,
        embed_dim: 6,
        p: 0.1,
        s: 10,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        adam: AdamConfig::default(),
        batch_size: 64,
        max_epochs: 40,
        patience: 10,
        seed: 0,
    };
    let seeds = [1u64, 2, 3];
    let mut data_per_seed = Vec::new();
    for &seed in &seeds {
        let synth = generate_synthetic(12, 2000, seed, &SynthParams::default()).unwrap();
        let data = prepare_dataset(&synth.series, cfg.h, cfg.l, 0.5, seed).unwrap();
        data_per_seed.push((seed, data, synth.adjacency));
    }
    let results = run_ablation(&data_per_seed, &cfg, &tc).unwrap();

    // per-seed comparisons are reported; the criterion is judged on
    // seed means with 5% slack
    let slack = 1.05;
    for (name, _) in variants().iter().skip(1) {
        for &seed in &seeds {
            let full = results
                .iter()
                .find(|r| r.variant == "ibn" && r.seed == seed)
                .unwrap();
            let ablated = results
                .iter()
                .find(|r| r.variant == *name && r.seed == seed)
                .unwrap();
            if full.report.mae > ablated.report.mae * slack {
                println!(
                    "  seed {seed}: full {:.4} above {name} {:.4} + slack",
                    full.report.mae, ablated.report.mae
                );
            }
        }
    }

    let means = mean_mae_by_variant(&results);
    let full_mean = means
        .iter()
        .find(|(name, _)| *name == "ibn")
        .map(|(_, m)| *m)
        .unwrap();
    let mut pass = true;
    let mut detail = format!("mean MAE over {} seeds: ibn {:.4}", seeds.len(), full_mean);
    for (name, mean) in means.iter().skip(1) {
        if full_mean > mean * slack {
            pass = false;
        }
        detail.push_str(&format!(", {name} {mean:.4}"));
    }
    verdict(8, "ablation-directionality", pass, &detail);
}

#[test]
fn criterion_09_uncertainty_tracks_reconstruction_error() {
    let run = desk_run();
    let pass = matches!(run.spearman, Some(rho) if rho > 0.0);
    let rho = run
        .spearman
        .map_or("NA".to_string(), |rho| format!("{rho:.4}"));
    verdict(
        9,
        "uncertainty-interpretability",
        pass,
        &format!(
            "Spearman rho {rho} over {} (variable, window) rows",
            run.diagnostic_rows
        ),
    );
}

#[test]
fn criterion_10_checkpoint_round_trip_preserves_evaluation() {
    let (cfg, data, a_pre) = tiny_setup(10);
    let mut model = ForecastModel::new(cfg, Default::default(), a_pre, 10).unwrap();
    let tc = tiny_train_cfg(10, 3);
    train(&mut model, &data, &tc).unwrap();
    let before = evaluate(&model, &data.test, &data.mask, &data.scaler, 10).unwrap();

    let dir = tempfile::tempdir().unwrap();
    ibn_core::checkpoint::save_checkpoint(dir.path(), &model, None).unwrap();
    let (loaded, _) = ibn_core::checkpoint::load_checkpoint(dir.path()).unwrap();
    let after = evaluate(&loaded, &data.test, &data.mask, &data.scaler, 10).unwrap();

    let identical =
        serde_json::to_string(&before).unwrap() == serde_json::to_string(&after).unwrap();
    verdict(
        10,
        "checkpoint-round-trip",
        identical,
        &format!("evaluation report identical after save and load: {identical}"),
    );
}
