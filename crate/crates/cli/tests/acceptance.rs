//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tprnn::baselines::{LinearMap, SeasonalNaive};
use tprnn::data::{Ratios, SeriesDataset, Split};
use tprnn::interaction::RnnKind;
use tprnn::model::{
    load_checkpoint, save_checkpoint, CheckpointError, Model, ModelConfig, Variant,
};
use tprnn::params::Bound;
use tprnn::tensor::{grad_check, Axis, Graph, PoolMode, Tensor, Var};
use tprnn::training::{evaluate, fit_with, l1_loss, Forecaster, TrainConfig};
use tprnn::Error;
use tprnn_cli::commands::{self, train_and_score};
use tprnn_cli::{Overrides, RunConfig};

type Outcome = Result<String, String>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rnn(name: &str) -> RnnKind {
    tprnn_cli::config::parse_named(name).unwrap()
}

fn preset(seed: u64, noise: f64, threads: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply(&Overrides {
        seed: Some(seed),
        noise: Some(noise),
        threads: Some(threads),
        ..Default::default()
    });
    cfg.validate().unwrap();
    cfg
}

// ---------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, Error>>;
    let op = |f: fn(&mut Graph, &[Var]) -> Result<Var, Error>| -> OpFn { Box::new(f) };
    let cases: Vec<(&str, OpFn, Vec<Vec<usize>>)> = vec![
        (
            "matmul",
            op(|g, v| Ok(g.matmul(v[0], v[1])?)),
            vec![vec![3, 4], vec![4, 2]],
        ),
        (
            "add",
            op(|g, v| Ok(g.add(v[0], v[1])?)),
            vec![vec![3, 2], vec![3, 2]],
        ),
        (
            "sub",
            op(|g, v| Ok(g.sub(v[0], v[1])?)),
            vec![vec![3, 2], vec![3, 2]],
        ),
        (
            "mul",
            op(|g, v| Ok(g.mul(v[0], v[1])?)),
            vec![vec![3, 2], vec![3, 2]],
        ),
        ("sigmoid", op(|g, v| Ok(g.sigmoid(v[0]))), vec![vec![4, 3]]),
        ("tanh", op(|g, v| Ok(g.tanh(v[0]))), vec![vec![4, 3]]),
        ("abs", op(|g, v| Ok(g.abs(v[0]))), vec![vec![4, 3]]),
        (
            "scale_shift",
            op(|g, v| Ok(g.scale_shift(v[0], -1.5, 0.3))),
            vec![vec![4, 3]],
        ),
        (
            "affine feature",
            op(|g, v| Ok(g.affine(v[0], v[1], Some(v[2]), Axis::Feature)?)),
            vec![vec![5, 3], vec![3, 4], vec![4]],
        ),
        (
            "affine time",
            op(|g, v| Ok(g.affine(v[0], v[1], Some(v[2]), Axis::Time)?)),
            vec![vec![5, 3], vec![5, 2], vec![2]],
        ),
        (
            "conv1d",
            op(|g, v| Ok(g.conv1d(v[0], v[1], 2)?)),
            vec![vec![9, 2], vec![2, 2]],
        ),
        (
            "max pool",
            op(|g, v| Ok(g.pool1d(PoolMode::Max, v[0], 2, 2)?)),
            vec![vec![8, 3]],
        ),
        (
            "min pool",
            op(|g, v| Ok(g.pool1d(PoolMode::Min, v[0], 2, 2)?)),
            vec![vec![8, 3]],
        ),
        (
            "avg pool",
            op(|g, v| Ok(g.pool1d(PoolMode::Avg, v[0], 2, 2)?)),
            vec![vec![8, 3]],
        ),
        (
            "pad_replicate",
            op(|g, v| Ok(g.pad_replicate(v[0], 2)?)),
            vec![vec![5, 2]],
        ),
        (
            "stack",
            op(|g, v| Ok(g.stack(v, 1)?)),
            vec![vec![4, 2], vec![4, 2]],
        ),
        (
            "concat",
            op(|g, v| Ok(g.concat(v, 0)?)),
            vec![vec![3, 2], vec![4, 2]],
        ),
        (
            "narrow",
            op(|g, v| Ok(g.narrow(v[0], 0, 1, 3)?)),
            vec![vec![5, 2]],
        ),
        (
            "select",
            op(|g, v| Ok(g.select(v[0], 1, 1)?)),
            vec![vec![5, 3]],
        ),
        (
            "reshape",
            op(|g, v| Ok(g.reshape(v[0], &[10])?)),
            vec![vec![5, 2]],
        ),
        (
            "weighted_sum",
            op(|g, v| Ok(g.weighted_sum(v[0], 1, v[1], Some(v[2]))?)),
            vec![vec![4, 3, 2], vec![3], vec![1]],
        ),
        (
            "dropout",
            op(|g, v| {
                // A fixed generator gives every evaluation the same mask.
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                Ok(g.dropout_with(v[0], 0.3, true, &mut rng)?)
            }),
            vec![vec![6, 3]],
        ),
        ("sum", op(|g, v| Ok(g.sum(v[0]))), vec![vec![4, 3]]),
        ("mean", op(|g, v| Ok(g.mean(v[0]))), vec![vec![4, 3]]),
        (
            "l1_loss",
            op(|g, v| l1_loss(g, v[0], v[1])),
            vec![vec![4, 3], vec![4, 3]],
        ),
    ];
    let mut worst = (0.0f64, "");
    for (name, f, shapes) in &cases {
        for _ in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            // Random output weights keep per-entry errors from cancelling in the sum.
            let weights = random(&mut rng, &[64]);
            let err = grad_check(
                |g: &mut Graph, v: &[Var]| -> Result<Var, Error> {
                    let out = f(g, v)?;
                    let n = g.value(out).len();
                    let w = g.constant(Tensor::new(vec![n], weights.values()[..n].to_vec())?);
                    let flat = g.reshape(out, &[n])?;
                    Ok(g.mul(flat, w)?)
                },
                &inputs,
                1e-6,
            )
            .map_err(|e| format!("{name}: {e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    ensure(worst.0 < 1e-4, || {
        format!("op {} has relative error {:.2e}", worst.1, worst.0)
    })?;

    let mut model_worst = 0.0f64;
    for name in ["vanilla", "lstm", "gru"] {
        let cfg = ModelConfig {
            hidden: Some(3),
            global_len: 2,
            rnn: self::rnn(name),
            ..ModelConfig::new(16, 4, 2)
        };
        let m = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
        let n = m.params().len();
        let mut inputs: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
        inputs.push(random(&mut rng, &[16, 2]));
        let target = random(&mut rng, &[4, 2]);
        let err = grad_check(
            |g: &mut Graph, v: &[Var]| -> Result<Var, Error> {
                let bound = Bound::from_vars(v[..n].to_vec());
                let out = m.forward(g, &bound, v[n])?;
                let y = g.constant(target.clone());
                l1_loss(g, out, y)
            },
            &inputs,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        ensure(err < 1e-4, || {
            format!("end-to-end {name} model has relative error {err:.2e}")
        })?;
        model_worst = model_worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops max err {:.1e}, end-to-end max err {model_worst:.1e}, {secs:.1}s",
        cases.len(),
        worst.0
    ))
}

fn pyramid_arithmetic() -> Outcome {
    let cfg = ModelConfig {
        num_scales: 3,
        global_len: 2,
        ..ModelConfig::new(96, 24, 5)
    };
    let m = Model::new(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let bound = m.params().bind_frozen(&mut g);
    let x = g.constant(random(&mut rng, &[96, 5]));
    let trace = m
        .forward_traced(&mut g, &bound, x)
        .map_err(|e| e.to_string())?;
    let shapes: Vec<Vec<usize>> = trace.levels.iter().map(|&l| g.shape(l).to_vec()).collect();
    ensure(
        shapes == [vec![96, 5], vec![48, 5], vec![24, 5], vec![12, 5]],
        || format!("{shapes:?}"),
    )?;
    Ok("lengths [96, 48, 24, 12], D=5 at every level".into())
}

fn structural_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig::new(96, 24, 2);
    let x = random(&mut rng, &[96, 2]);

    let mut full = Model::new(cfg.clone()).unwrap();
    let mut skip = Model::new(ModelConfig {
        variant: Variant::NoInterscale,
        ..cfg.clone()
    })
    .unwrap();
    skip.params_mut().copy_matching(full.params());
    for p in full.params_mut().iter_mut() {
        if p.name.starts_with("inter.") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    ensure(
        full.forecast(&x).unwrap() == skip.forecast(&x).unwrap(),
        || "zeroed inter-scale weights differ from no_interscale".into(),
    )?;

    for scale in 0..=cfg.num_scales {
        let mut m = Model::new(cfg.clone()).unwrap();
        let mut w = vec![0.0; cfg.num_scales + 1];
        w[scale] = 1.0;
        m.params_mut().set("fusion.w", Tensor::vector(w)).unwrap();
        let mut g = Graph::new();
        let bound = m.params().bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let trace = m.forward_traced(&mut g, &bound, xv).unwrap();
        ensure(
            g.value(trace.output) == g.value(trace.predictions[scale]),
            || format!("one-hot fusion on scale {scale} differs from its predictor"),
        )?;
    }

    let a = Model::new(cfg.clone()).unwrap();
    let b = Model::new(cfg).unwrap();
    let first = a.forecast(&x).unwrap();
    ensure(
        first == a.forecast(&x).unwrap() && first == b.forecast(&x).unwrap(),
        || "eval-mode forward is not repeatable".into(),
    )?;
    Ok(
        "zero-inter == no_interscale, one-hot fusion == predictor, repeatable forward (bitwise)"
            .into(),
    )
}

fn gate_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0usize;
    for i in 0..100u64 {
        let cfg = ModelConfig {
            seed: i,
            global_len: 2,
            rnn: rnn(["vanilla", "lstm", "gru"][i as usize % 3]),
            ..ModelConfig::new(32, 8, 3)
        };
        let m = Model::new(cfg).unwrap();
        // Every other forward runs with dropout active.
        let mut g = if i % 2 == 0 {
            Graph::new()
        } else {
            Graph::training(i)
        };
        let bound = m.params().bind_frozen(&mut g);
        let x = g.constant(random(&mut rng, &[32, 3]).map(|v| v * 3.0));
        let trace = m.forward_traced(&mut g, &bound, x).unwrap();
        for (s, intra) in trace.interaction.intra.iter().enumerate() {
            let intra = intra.as_ref().ok_or("intra block missing")?;
            let (z_hat, z) = (g.value(intra.gated), g.value(intra.ungated));
            for (a, b) in z_hat.values().iter().zip(z.values()) {
                ensure(a.abs() <= b.abs(), || {
                    format!("forward {i}, scale {s}: |{a}| > |{b}|")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("100 forwards, {checked} entries"))
}

fn early_stopping() -> Outcome {
    let cfg = preset(0, 0.1, 0);
    let ds = cfg.dataset_for(24, 6).unwrap();
    let train = ds.windows(Split::Train, 24, 6, 1).unwrap();
    let mut model = LinearMap::new(24, 6, 0).unwrap();
    let seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.96, 0.1, 0.1];
    let mut snapshots = Vec::new();
    let state = fit_with(
        &mut model,
        &train,
        &TrainConfig::default(),
        |m: &LinearMap| {
            snapshots.push(tprnn::training::Trainable::params(m).clone());
            Ok(seq[snapshots.len() - 1])
        },
        |_| Ok(()),
    )
    .map_err(|e| e.to_string())?;
    ensure(state.history.len() == 8, || {
        format!("stopped after {} evaluations", state.history.len())
    })?;
    ensure(state.best_epoch() == 2, || {
        format!("best epoch {}", state.best_epoch())
    })?;
    ensure(
        tprnn::training::Trainable::params(&model) == &snapshots[1],
        || "returned parameters are not the epoch-2 snapshot".into(),
    )?;
    Ok("stopped after evaluation 8, epoch-2 parameters returned".into())
}

fn overfit_sanity() -> Outcome {
    let cfg = preset(0, 0.0, 1);
    let start = Instant::now();
    let ds = cfg.dataset().map_err(|e| e.to_string())?;
    let model = Model::new(cfg.model_config(ds.num_channels())).unwrap();
    let trained = train_and_score(model, &cfg, &ds, |_| Ok(())).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let train_l1 = evaluate(&trained.model, &ds, Split::Train).unwrap().mae();
    let last = trained.state.history.last().unwrap();
    ensure(trained.state.epoch <= 30, || {
        format!("{} epochs", trained.state.epoch)
    })?;
    ensure(train_l1 < 0.05, || format!("train L1 {train_l1:.4}"))?;
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "train L1 {train_l1:.4} (last epoch with dropout {:.4}) after {} epochs, {secs:.0}s on 1 thread",
        last.train_loss, trained.state.epoch
    ))
}

struct SeedScores {
    full: f64,
    no_all: f64,
    linear: f64,
    naive: f64,
}

fn skill_runs() -> Result<Vec<SeedScores>, String> {
    let mut out = Vec::new();
    for seed in 0..3 {
        let cfg = preset(seed, 0.1, 0);
        let ds = cfg.dataset().map_err(|e| e.to_string())?;
        let test = |m: &dyn Fn() -> tprnn::Result<f64>| m().map_err(|e| e.to_string());
        let model_mse = |variant: Variant| -> tprnn::Result<f64> {
            let mcfg = ModelConfig {
                variant,
                ..cfg.model_config(ds.num_channels())
            };
            let t = train_and_score(Model::new(mcfg)?, &cfg, &ds, |_| Ok(()))?;
            Ok(t.test.expect("test split").mse())
        };
        let full = test(&|| model_mse(Variant::Full))?;
        let no_all = test(&|| model_mse(Variant::NoAll))?;
        let linear = test(&|| {
            let t = train_and_score(LinearMap::new(96, 24, seed)?, &cfg, &ds, |_| Ok(()))?;
            Ok(t.test.expect("test split").mse())
        })?;
        let naive =
            test(&|| Ok(evaluate(&SeasonalNaive::new(96, 24, 24)?, &ds, Split::Test)?.mse()))?;
        out.push(SeedScores {
            full,
            no_all,
            linear,
            naive,
        });
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn forecast_skill(runs: &[SeedScores]) -> Outcome {
    let full = mean(runs.iter().map(|r| r.full));
    let linear = mean(runs.iter().map(|r| r.linear));
    let naive = mean(runs.iter().map(|r| r.naive));
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.full)).collect();
    let detail = format!(
        "test MSE over 3 seeds: full {full:.4} [{}], linear {linear:.4}, seasonal-naive {naive:.4}",
        per_seed.join(", ")
    );
    ensure(full <= naive && full <= linear, || detail.clone())?;
    Ok(detail)
}

fn ablation_direction(runs: &[SeedScores]) -> Outcome {
    let full = mean(runs.iter().map(|r| r.full));
    let no_all = mean(runs.iter().map(|r| r.no_all));
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r.full, r.no_all))
        .collect();
    let detail = format!(
        "test MSE over 3 seeds: full {full:.4} vs no_all {no_all:.4} (per seed {})",
        per_seed.join(", ")
    );
    ensure(full <= no_all, || detail.clone())?;
    Ok(detail)
}

fn sweep_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset(0, 0.1, 0);
    cfg.train.max_epochs = 2;
    cfg.out = dir.path().join("sweep");
    cfg.sweep.values = (1..=10).collect();
    let sw = commands::sweep(&cfg, false).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(cfg.out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    ensure(lines.next() == Some("global_len,mse,mae"), || {
        "bad header".into()
    })?;
    let mut prev = 0usize;
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure(f.len() == 3, || format!("bad row {line:?}"))?;
        let lg: usize = f[0].parse().map_err(|_| format!("bad row {line:?}"))?;
        let nums: Vec<f64> = f[1..].iter().filter_map(|v| v.parse().ok()).collect();
        ensure(
            lg > prev && nums.len() == 2 && nums.iter().all(|v| v.is_finite()),
            || format!("bad row {line:?}"),
        )?;
        prev = lg;
        rows += 1;
    }
    ensure(
        (1..=10).contains(&rows) && rows + sw.skipped.len() == 10,
        || format!("{rows} rows, {} skipped", sw.skipped.len()),
    )?;
    Ok(format!("{rows} rows for global_len 1..10 (2-epoch budget)"))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ckpt");
    let mut m = Model::new(ModelConfig::new(96, 24, 2)).unwrap();
    save_checkpoint(&m, &stem, None).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint(&stem).map_err(|e| e.to_string())?;
    m.params_mut().round_to_f32();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let x = random(&mut rng, &[96, 2]);
        ensure(
            m.forecast(&x).unwrap() == loaded.forecast(&x).unwrap(),
            || "reloaded forecast differs".into(),
        )?;
    }
    let payload = dir.path().join("ckpt.params.bin");
    let clean = std::fs::read(&payload).unwrap();
    for _ in 0..50 {
        let mut bytes = clean.clone();
        let i = rng.random_range(0..bytes.len());
        bytes[i] ^= rng.random_range(1..=255u8);
        std::fs::write(&payload, &bytes).unwrap();
        match load_checkpoint(&stem) {
            Err(Error::Checkpoint(CheckpointError::Checksum { .. })) => {}
            other => {
                return Err(format!(
                    "corruption at byte {i} not detected: {:?}",
                    other.map(|_| ())
                ))
            }
        }
    }
    Ok("bitwise round trip at f32; 50/50 single-byte corruptions detected".into())
}

fn split_hygiene() -> Outcome {
    let cfg = preset(0, 0.1, 0);
    let raw = cfg.raw_dataset().unwrap();
    let ratios = Ratios::default();
    let base = raw
        .clone()
        .with_splits(ratios, 96, 24)
        .unwrap()
        .normalized()
        .unwrap();
    let test = base.splits().unwrap().test.clone();
    let d = raw.num_channels();
    let mut values = raw.values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in &mut values[test.start * d..] {
        *v = rng.random_range(-1e6..1e6);
    }
    let mutated = SeriesDataset::new(raw.channel_names().to_vec(), None, values)
        .unwrap()
        .with_splits(ratios, 96, 24)
        .unwrap()
        .normalized()
        .unwrap();
    ensure(base.scaler() == mutated.scaler(), || {
        "scaler changed".into()
    })?;

    let mut windows = 0usize;
    for case in 0..300 {
        let n = rng.random_range(20..400);
        let (t, h) = (rng.random_range(1..24), rng.random_range(1..12));
        let r = Ratios::from_parts(
            rng.random_range(1..10) as f64,
            rng.random_range(0..4) as f64,
            rng.random_range(0..4) as f64,
        )
        .unwrap();
        let series =
            SeriesDataset::new(vec!["x".into()], None, (0..n).map(|i| i as f64).collect()).unwrap();
        let Ok(ds) = series.with_splits(r, t, h) else {
            continue;
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            let range = ds.splits().unwrap().range(split);
            let Ok(ws) = ds.windows(split, t, h, 1) else {
                continue;
            };
            for w in ws.iter() {
                let inside = w
                    .input
                    .values()
                    .iter()
                    .chain(w.target.values())
                    .all(|&v| range.contains(&(v as usize)));
                ensure(inside, || {
                    format!(
                        "case {case}: {split} window at {} leaves {range:?}",
                        w.start
                    )
                })?;
                windows += 1;
            }
        }
    }
    Ok(format!("scaler unchanged by test-row mutation; {windows} windows over 300 random (N, T, H) stay in split"))
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match &outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    let guarded = |f: &dyn Fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };

    report("gradient oracle", guarded(&gradient_oracle));
    report("pyramid arithmetic", guarded(&pyramid_arithmetic));
    report("structural identities", guarded(&structural_identities));
    report("gate bound", guarded(&gate_bound));
    report("early stopping", guarded(&early_stopping));
    report("overfit sanity", guarded(&overfit_sanity));
    match catch_unwind(skill_runs).unwrap_or_else(|_| Err("panicked".into())) {
        Ok(runs) => {
            report("forecast skill", forecast_skill(&runs));
            report("ablation direction", ablation_direction(&runs));
        }
        Err(e) => {
            report("forecast skill", Err(e.clone()));
            report("ablation direction", Err(e));
        }
    }
    report("sweep harness", guarded(&sweep_harness));
    report("persistence", guarded(&persistence));
    report("split hygiene", guarded(&split_hygiene));

    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
