//! Acceptance suite: one test per criterion, each printing a pass line with
//! its runtime (visible under --nocapture). Criteria cover the analytic loss
//! values, gradient oracles, estimator properties, split integrity, pipeline
//! determinism, and the synthetic directional experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;

use twinrec_core::corpus::{self, DatasetBundle, Interaction, InteractionLog, SourceMeta};
use twinrec_core::evaluator::{self, RankedList};
use twinrec_core::objectives::{self, ViewBatch};
use twinrec_core::rng::{next_gaussian, splitmix64, stream, Purpose};
use twinrec_core::synthetic::{write_markov_tsv, MarkovSpec};
use twinrec_core::trainer::{self, LossKind, TrainConfig, TrainOptions};
use twinrec_core::{ItemId, Timestamp, UserId};

fn pass(criterion: usize, name: &str, t0: Instant) {
    println!(
        "ACCEPTANCE {criterion:02} ({name}): PASS in {:.2}s",
        t0.elapsed().as_secs_f64()
    );
}

#[test]
fn acceptance_01_bt_loss_analytic_suite() {
    let t0 = Instant::now();
    let identity = objectives::CorrelationMatrix {
        matrix: Array2::eye(4),
        degenerate_a: vec![],
        degenerate_b: vec![],
    };
    assert_eq!(objectives::bt_loss(&identity, 0.2), 0.0, "identity must cost exactly 0");

    let half = objectives::CorrelationMatrix {
        matrix: ndarray::array![[1.0, 0.5], [0.5, 1.0]],
        degenerate_a: vec![],
        degenerate_b: vec![],
    };
    let loss = objectives::bt_loss(&half, 0.2);
    assert!(
        (loss - 0.1).abs() <= 1e-12,
        "loss {loss} should be 0.1 within 1e-12"
    );
    assert!(t0.elapsed().as_secs_f64() < 1.0);
    pass(1, "bt loss analytic", t0);
}

#[test]
fn acceptance_02_gradient_oracle_all_losses() {
    let t0 = Instant::now();
    // Toy config per the criterion: catalog 20 (built into gradcheck), D=8,
    // L=2, batch of 4, alpha = 0.3, central differences with step 1e-5.
    let cfg = TrainConfig {
        alpha: 0.3,
        lambda: 0.2,
        dim: 8,
        layers: 2,
        heads: 2,
        max_len: 8,
        dropout: 0.0,
        sce_k: 6,
        bce_m: 2,
        batch_size: 4,
        seed: 99,
        ..TrainConfig::default()
    };
    let reports = trainer::gradcheck(&cfg).unwrap();
    assert_eq!(reports.len(), 3);
    for report in &reports {
        assert!(
            report.passed(1e-4),
            "{}: max elementwise rel err {:.3e} exceeds 1e-4",
            report.loss_kind,
            report.max_rel_err
        );
    }
    assert!(t0.elapsed().as_secs_f64() < 60.0);
    pass(2, "gradient oracle bce/ce/sce + bt", t0);
}

#[test]
fn acceptance_03_sce_ce_equivalence_on_full_catalog() {
    let t0 = Instant::now();
    let mut rng = stream(303, Purpose::Eval, &[]);
    for trial in 0..100 {
        let n = 2 + (trial % 47);
        let logits: Vec<f64> = (0..n).map(|_| next_gaussian(&mut rng) * 4.0).collect();
        let target = trial % n;
        let ce = objectives::ce_from_logits(&logits, target);
        let sce = objectives::sce_loss(&logits, target).unwrap();
        assert!(
            (ce - sce).abs() <= 1e-10,
            "trial {trial}: |{ce} - {sce}| > 1e-10"
        );
    }
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    pass(3, "sce equals ce on the full catalog", t0);
}

#[test]
fn acceptance_04_cross_correlation_properties() {
    let t0 = Instant::now();
    for trial in 0..200u64 {
        let mut rng = stream(404, Purpose::Eval, &[trial]);
        let b = 2 + (splitmix64(trial) % 18) as usize;
        let d = 1 + (splitmix64(trial ^ 0xabc) % 12) as usize;
        let a = Array2::from_shape_fn((b, d), |_| next_gaussian(&mut rng));
        let bm = Array2::from_shape_fn((b, d), |_| next_gaussian(&mut rng));

        // Unit diagonal for self-views.
        let self_view = objectives::cross_correlation(
            &ViewBatch::new(a.clone(), a.clone()).unwrap(),
            true,
        );
        for i in 0..d {
            if !self_view.degenerate_a.contains(&i) {
                assert!(
                    (self_view.matrix[[i, i]] - 1.0).abs() <= 1e-9,
                    "trial {trial}: self diag {}",
                    self_view.matrix[[i, i]]
                );
            }
        }

        // Transpose symmetry and range.
        let ab = objectives::cross_correlation(
            &ViewBatch::new(a.clone(), bm.clone()).unwrap(),
            true,
        );
        let ba = objectives::cross_correlation(
            &ViewBatch::new(bm.clone(), a.clone()).unwrap(),
            true,
        );
        for ((i, j), &v) in ab.matrix.indexed_iter() {
            assert!(v.abs() <= 1.0 + 1e-9, "trial {trial}: C[{i},{j}] = {v}");
            assert!((v - ba.matrix[[j, i]]).abs() <= 1e-12);
        }

        // Loss invariance under joint row and joint coordinate permutations.
        let lambda = 0.3;
        let base = objectives::bt_loss(&ab, lambda);
        let rows = permutation(b, trial ^ 0x11);
        let cols = permutation(d, trial ^ 0x22);
        let rowed = objectives::bt_loss(
            &objectives::cross_correlation(
                &ViewBatch::new(permute_rows(&a, &rows), permute_rows(&bm, &rows)).unwrap(),
                true,
            ),
            lambda,
        );
        let coled = objectives::bt_loss(
            &objectives::cross_correlation(
                &ViewBatch::new(permute_cols(&a, &cols), permute_cols(&bm, &cols)).unwrap(),
                true,
            ),
            lambda,
        );
        assert!((base - rowed).abs() <= 1e-9, "trial {trial}: row perm");
        assert!((base - coled).abs() <= 1e-9, "trial {trial}: coordinate perm");
    }
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    pass(4, "cross-correlation properties, 200 trials", t0);
}

#[test]
fn acceptance_05_effective_rank() {
    let t0 = Instant::now();
    // Direct entropy oracle on a matrix with known singular values [3, 1].
    let m = ndarray::array![[3.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
    let report = evaluator::effective_rank(&m).unwrap();
    let oracle = {
        let p: [f64; 2] = [0.75, 0.25];
        (-p.iter().map(|&x| x * x.ln()).sum::<f64>()).exp()
    };
    assert!((report.effective_rank - oracle).abs() <= 1e-9);
    assert!((report.effective_rank - 1.7548).abs() <= 1e-3);

    // Scaling and rotation invariance.
    let mut rng = stream(505, Purpose::Eval, &[]);
    let m = Array2::from_shape_fn((15, 5), |_| next_gaussian(&mut rng));
    let base = evaluator::effective_rank(&m).unwrap().effective_rank;
    let scaled = evaluator::effective_rank(&(&m * 123.456)).unwrap().effective_rank;
    assert!((base - scaled).abs() <= 1e-9, "scaling: {base} vs {scaled}");
    let g = nalgebra_matrix(5, 5, &mut rng);
    let q = g.qr().q();
    let mn = nalgebra::DMatrix::from_row_iterator(15, 5, m.iter().copied());
    let rotated = mn * q;
    let rotated = Array2::from_shape_fn((15, 5), |(i, j)| rotated[(i, j)]);
    let rot = evaluator::effective_rank(&rotated).unwrap().effective_rank;
    assert!((base - rot).abs() <= 1e-9, "rotation: {base} vs {rot}");
    assert!(t0.elapsed().as_secs_f64() < 1.0);
    pass(5, "effective rank oracle + invariances", t0);
}

#[test]
fn acceptance_06_metric_unit_suite() {
    let t0 = Instant::now();
    let truth: BTreeMap<UserId, ItemId> = [(1, 42)].into();
    let rank3 = vec![RankedList {
        user: 1,
        items: vec![2, 3, 42, 4, 5, 6, 7, 8, 9, 10],
    }];
    assert!((evaluator::ndcg_at(&rank3, &truth, 10).unwrap() - 0.5).abs() < 1e-15);
    let rank7 = vec![RankedList {
        user: 1,
        items: vec![2, 3, 4, 5, 6, 7, 42, 8, 9, 10],
    }];
    assert_eq!(evaluator::hit_rate_at(&rank7, &truth, 5).unwrap(), 0.0);
    assert_eq!(evaluator::hit_rate_at(&rank7, &truth, 10).unwrap(), 1.0);

    let two_users = vec![
        RankedList { user: 1, items: vec![1, 2] },
        RankedList { user: 2, items: vec![2, 3] },
    ];
    assert!((evaluator::coverage_at(&two_users, 4, 2) - 0.75).abs() < 1e-15);

    // Monotonicity over randomized instances.
    for trial in 0..100u64 {
        let catalog = 30u32;
        let mut truth = BTreeMap::new();
        let ranked: Vec<RankedList> = (1..=5u32)
            .map(|u| {
                let mut items: Vec<ItemId> = (1..=catalog).collect();
                let mut state = splitmix64(trial * 31 + u as u64);
                for i in (1..items.len()).rev() {
                    state = splitmix64(state);
                    items.swap(i, (state % (i as u64 + 1)) as usize);
                }
                items.truncate(15);
                truth.insert(u, (splitmix64(state) % catalog as u64) as ItemId + 1);
                RankedList { user: u, items }
            })
            .collect();
        let mut prev_hr = 0.0;
        let mut prev_cov = 0.0;
        for k in 1..=15 {
            let hr = evaluator::hit_rate_at(&ranked, &truth, k).unwrap();
            let cov = evaluator::coverage_at(&ranked, catalog, k);
            assert!(hr >= prev_hr && cov >= prev_cov, "trial {trial} k {k}");
            prev_hr = hr;
            prev_cov = cov;
        }
    }
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    pass(6, "metric unit suite", t0);
}

#[test]
fn acceptance_07_split_integrity_randomized() {
    let t0 = Instant::now();
    let mut splits_checked = 0usize;
    for trial in 0..1000u64 {
        // Random log with one globally unique item per event, so item ->
        // timestamp is unambiguous and the protocol can be audited from the
        // outside. Per-user timestamps strictly increase.
        let mut rng_state = splitmix64(trial + 7_000);
        let num_users = 3 + (rng_state % 10) as u32;
        let mut events = Vec::new();
        let mut next_item: ItemId = 1;
        let mut item_time: BTreeMap<ItemId, Timestamp> = BTreeMap::new();
        for user in 1..=num_users {
            rng_state = splitmix64(rng_state);
            let len = 2 + (rng_state % 9) as usize;
            rng_state = splitmix64(rng_state);
            let base = rng_state % 1000;
            for k in 0..len {
                rng_state = splitmix64(rng_state);
                let time = base + k as Timestamp * (1 + rng_state % 20);
                events.push(Interaction {
                    user,
                    item: next_item,
                    time,
                });
                item_time.insert(next_item, time);
                next_item += 1;
            }
        }
        let log = InteractionLog {
            events,
            num_users,
            num_items: next_item - 1,
        };
        rng_state = splitmix64(rng_state);
        let quantile = 0.5 + (rng_state % 45) as f64 / 100.0;
        match corpus::temporal_split(&log, quantile) {
            Ok(split) => {
                splits_checked += 1;
                for e in &split.train.events {
                    assert!(
                        e.time <= split.boundary,
                        "trial {trial}: train event past the boundary"
                    );
                }
                for (user, h) in &split.heldout {
                    let test_time = item_time[&h.test];
                    let val_time = item_time[&h.validation];
                    assert!(
                        test_time > val_time,
                        "trial {trial} user {user}: test at {test_time} does not postdate validation at {val_time}"
                    );
                    assert!(test_time > split.boundary);
                }
            }
            Err(twinrec_core::Error::Split(_)) => {} // no post-boundary users
            Err(other) => panic!("trial {trial}: unexpected error {other}"),
        }
    }
    assert!(
        splits_checked >= 800,
        "only {splits_checked} of 1000 logs produced usable splits"
    );
    assert!(t0.elapsed().as_secs_f64() < 30.0);
    pass(7, "split integrity on 1000 random logs", t0);
}

fn twinrec() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_twinrec"));
    cmd.env("TWINREC_FIXED_TIMING", "1");
    cmd
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn markov_bundle_via_cli(dir: &Path, max_len: usize) -> PathBuf {
    let input = dir.join("markov.tsv");
    write_markov_tsv(&MarkovSpec::default(), &input).unwrap();
    let prep = dir.join("prep.json");
    std::fs::write(
        &prep,
        format!(r#"{{"min_count": 5, "quantile": 0.95, "max_len": {max_len}}}"#),
    )
    .unwrap();
    let bundle = dir.join("bundle.json");
    run_ok(twinrec()
        .args(["prepare", "--input"])
        .arg(&input)
        .arg("--dataset")
        .arg(&bundle)
        .arg("--config")
        .arg(&prep));
    bundle
}

#[test]
fn acceptance_08_pipeline_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("train.json");
    std::fs::write(
        &cfg_path,
        r#"{"loss_kind": "ce", "alpha": 0.3, "lambda": 0.4, "dim": 16, "layers": 1,
            "heads": 2, "max_len": 16, "dropout": 0.2, "batch_size": 128,
            "epochs": 3, "seed": 7}"#,
    )
    .unwrap();

    let mut artifacts = Vec::new();
    for tag in ["r1", "r2"] {
        // Full pipeline: prepare -> train -> evaluate, seed 7.
        let run_dir = dir.path().join(tag);
        std::fs::create_dir_all(&run_dir).unwrap();
        let bundle = markov_bundle_via_cli(&run_dir, 16);
        let ckpt = run_dir.join("model.ckpt");
        let log = run_dir.join("trainlog.csv");
        let report = run_dir.join("report.json");
        run_ok(twinrec()
            .args(["train", "--dataset"])
            .arg(&bundle)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--report")
            .arg(&log));
        run_ok(twinrec()
            .args(["evaluate", "--dataset"])
            .arg(&bundle)
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--report")
            .arg(&report));
        artifacts.push((
            std::fs::read(&bundle).unwrap(),
            std::fs::read(&log).unwrap(),
            std::fs::read(&report).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "bundles differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "train logs differ");
    assert_eq!(artifacts[0].2, artifacts[1].2, "eval reports differ");
    assert!(t0.elapsed().as_secs_f64() < 600.0);
    pass(8, "pipeline determinism, byte-identical artifacts", t0);
}

/// Popularity baseline: rank items by train frequency, hit rate of the top-10
/// global list over the test pool. Computed here, independent of the
/// evaluator.
fn popularity_hr10(bundle: &DatasetBundle) -> f64 {
    let counts = bundle.train_item_counts();
    let mut ids: Vec<ItemId> = (1..=bundle.num_items).collect();
    ids.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let top10: std::collections::BTreeSet<ItemId> = ids.into_iter().take(10).collect();
    let hits = bundle
        .heldout
        .values()
        .filter(|h| top10.contains(&h.test))
        .count();
    hits as f64 / bundle.heldout.len() as f64
}

#[test]
fn acceptance_09_synthetic_efficacy_directional() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let bundle_path = markov_bundle_via_cli(dir.path(), 16);
    let bundle = DatasetBundle::load(&bundle_path).unwrap();

    let cfg_path = dir.path().join("train.json");
    std::fs::write(
        &cfg_path,
        r#"{"loss_kind": "ce", "alpha": 0.0, "lambda": 0.4, "dim": 32, "layers": 2,
            "heads": 2, "max_len": 16, "dropout": 0.2, "batch_size": 128,
            "epochs": 20, "seed": 1}"#,
    )
    .unwrap();
    let sweep_csv = dir.path().join("sweep.csv");
    run_ok(twinrec()
        .args(["sweep", "--dataset"])
        .arg(&bundle_path)
        .arg("--config")
        .arg(&cfg_path)
        .args([
            "--param", "alpha", "--values", "0.0,0.3", "--repeats", "3", "--seed", "1",
            "--report",
        ])
        .arg(&sweep_csv));

    let text = std::fs::read_to_string(&sweep_csv).unwrap();
    let header: Vec<String> = text
        .lines()
        .find(|l| l.starts_with("param,"))
        .unwrap()
        .split(',')
        .map(String::from)
        .collect();
    let col = |row: &[String], name: &str| -> f64 {
        let idx = header.iter().position(|h| h == name).unwrap();
        row[idx].parse().unwrap()
    };
    let rows: Vec<Vec<String>> = text
        .lines()
        .filter(|l| l.starts_with("alpha,"))
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let baseline = &rows[0];
    let regularized = &rows[1];
    assert_eq!(col(baseline, "ok"), 3.0);
    assert_eq!(col(regularized, "ok"), 3.0);

    // (a) 20-epoch CE training beats the popularity baseline by >= 3x.
    let pop = popularity_hr10(&bundle);
    let model_hr10 = col(baseline, "hr@10_mean");
    assert!(
        model_hr10 >= 3.0 * pop,
        "CE hr@10 {model_hr10:.4} is not >= 3x popularity baseline {pop:.4}"
    );

    // (b) mean cov@10 over 3 seeds strictly higher with the regularizer on.
    let cov_base = col(baseline, "cov@10_mean");
    let cov_bt = col(regularized, "cov@10_mean");
    assert!(
        cov_bt > cov_base,
        "cov@10 at alpha=0.3 ({cov_bt:.4}) does not exceed alpha=0 ({cov_base:.4})"
    );
    assert!(t0.elapsed().as_secs_f64() < 1800.0);
    pass(9, "synthetic efficacy: accuracy x3 and coverage gain", t0);
}

#[test]
fn acceptance_10_baseline_exactness_alpha_zero() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("markov.tsv");
    write_markov_tsv(
        &MarkovSpec {
            num_users: 150,
            num_items: 60,
            min_len: 8,
            max_len: 14,
            ..MarkovSpec::default()
        },
        &input,
    )
    .unwrap();
    let bundle = DatasetBundle::prepare(
        &input,
        SourceMeta {
            path: input.display().to_string(),
            delimiter: '\t',
            min_count: 5,
            quantile: 0.9,
            max_len: 12,
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        loss_kind: LossKind::Ce,
        alpha: 0.0,
        dim: 16,
        layers: 1,
        heads: 2,
        max_len: 12,
        epochs: 3,
        batch_size: 64,
        seed: 7,
        ..TrainConfig::default()
    };
    let plain = trainer::train(&cfg, &bundle).unwrap();
    let disabled =
        trainer::train_with_options(&cfg, &bundle, TrainOptions { disable_bt: true }).unwrap();

    // Bit-identical checkpoints and logs, and total = pred at every step.
    assert_eq!(plain.checkpoint, disabled.checkpoint);
    assert_eq!(
        plain.log.to_csv(&cfg.to_json(), true),
        disabled.log.to_csv(&cfg.to_json(), true)
    );
    for row in &plain.log.rows {
        assert_eq!(row.total_loss.to_bits(), row.pred_loss.to_bits());
        assert_eq!(row.bt_loss, 0.0);
    }
    pass(10, "alpha = 0 is bit-identical to a bt-disabled build", t0);
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut state = splitmix64(seed.wrapping_add(0x5151));
    for i in (1..n).rev() {
        state = splitmix64(state);
        perm.swap(i, (state % (i as u64 + 1)) as usize);
    }
    perm
}

fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&m.row(src));
    }
    out
}

fn permute_cols(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.column_mut(dst).assign(&m.column(src));
    }
    out
}

fn nalgebra_matrix(
    rows: usize,
    cols: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| next_gaussian(rng))
}
