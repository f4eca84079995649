//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion, non-zero
//! exit if any criterion fails.
//!
//! Criteria 1-3 and 6 exercise the library directly. Criteria 4, 5, 7 and 8
//! share one trained toy model produced by the `attnlab` binary, so the
//! trained weights, the eval run and every replay go through the same
//! command-line path a user would take.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use attnlab::evalharness::{
    filter_uniquely_solvable, generate_dataset, read_jsonl, summarize, Category, DatasetConfig,
    EvalItem, EvalOutcome, Mode, DEFAULT_COT_CUE,
};
use attnlab::interventions::{
    apply_amplification, apply_zero_anchor_prompt, apply_zero_non_anchor_prompt, apply_zero_prompt,
    apply_zero_recent, build_pattern_mask, InterventionKind, InterventionParams, InterventionSpec,
    LayerRange, MaskRule, PatternMask, Pipeline,
};
use attnlab::model::{
    AttentionHook, AttentionRecord, Model, ModelConfig, ModelWeights, SegmentMap,
};
use attnlab::numerics::log_sum_exp;
use attnlab::trainer::{grad_check, mean_loss};
use attnlab::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use tempfile::TempDir;

type Outcome = Result<String, String>;

/// Randomized cases per invariant.
const CASES: u32 = 256;

/// Training budget for the toy model; the criterion allows up to 2000.
const TRAIN_STEPS: usize = 600;
const TARGET_NATS: f64 = 0.5;
const TRAIN_TIME_LIMIT_S: f64 = 600.0;
/// Training losses are per minibatch; the criterion reads their trailing mean.
const LOSS_WINDOW: usize = 50;

const TOY_CONFIG: &str = r#"{
  "model": {"d_model": 64, "n_heads": 4, "n_layers": 4, "d_ff": 172, "max_seq": 256},
  "train": {"steps": 600, "learning_rate": 0.003, "batch_size": 8, "seed": 0,
            "schedule": "cosine", "warmup_steps": 50},
  "dataset": {"seed": 0, "n_items": 200},
  "eval": {"budget": 64}
}"#;

/// Amplification used for the intervened CoT run: source layer 0 guides
/// layers 1 through 3.
const AMPLIFY_SPEC: &str = r#"[{"kind": "amplify_top_pattern", "layer_range": [1, 3]}]"#;

/// Held-out items scored for the perplexity directions.
const PPL_ITEMS: usize = 40;
const RECENT_WINDOW: usize = 4;

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("temp dir");
    let work = Workspace::new(tmp.path());
    let mut all_ok = true;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(detail) => println!("[PASS] {n}. {name}: {detail}"),
        Err(detail) => {
            all_ok = false;
            println!("[FAIL] {n}. {name}: {detail}");
        }
    };
    report(1, "formula fidelity", formula_fidelity());
    report(2, "invariant suite", invariant_suite());
    report(3, "gradient check", gradient_check());
    let trained = work.train();
    report(
        4,
        "trainability",
        trained
            .as_ref()
            .map(|t| t.summary.clone())
            .map_err(Clone::clone),
    );
    let weights = trained.as_ref().ok().map(|t| t.weights.clone());
    report(
        5,
        "perplexity directions",
        with_model(&weights, perplexity_directions),
    );
    report(6, "pipeline methodology", pipeline_methodology());
    report(
        7,
        "token-length instrumentation",
        with_model(&weights, |w| work.eval(w)),
    );
    report(
        8,
        "reproducibility",
        with_model(&weights, |w| work.replays(w)),
    );
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn with_model(weights: &Option<PathBuf>, f: impl FnOnce(&Path) -> Outcome) -> Outcome {
    match weights {
        Some(w) => f(w),
        None => Err("no trained model (criterion 4 failed)".into()),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn formula_fidelity() -> Outcome {
    let (l, h) = (4, 31);
    // a 3-position record whose last row holds the 0.20 entry
    let scores = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0],
        vec![0.20, 0.30, 0.50],
    ])
    .map_err(err)?;
    let rec = AttentionRecord::new(l, 0, 0, scores).map_err(err)?;
    let mut mask = Tensor::zeros(&[3, 3]);
    mask.set(2, 0, 1.0);
    let mask = PatternMask {
        source_layer: 0,
        row_offset: 0,
        mask,
    };
    let open = SegmentMap::new(3, 1);

    let mut out = rec.clone();
    apply_amplification(&mut out, &mask, l, h, &open, false).map_err(err)?;
    let got = out.scores.get(2, 0);
    // 0.20 * (1 + 27/31) = 11.6 / 31
    let want = 0.374_193_548_387_096_8;
    ensure((got - want).abs() < 1e-9, || {
        format!("A'=0.20 gave {got}, want {want}")
    })?;
    ensure((got - 0.3741935).abs() < 1e-7, || {
        format!("{got} does not round to 0.3741935")
    })?;

    let mut full = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        for j in 0..=i {
            full.set(i, j, 1.0);
        }
    }
    let full = PatternMask {
        source_layer: 0,
        row_offset: 0,
        mask: full,
    };
    let mut same = rec.clone();
    apply_amplification(&mut same, &full, h, h, &open, true).map_err(err)?;
    ensure(bits(&same.scores) == bits(&rec.scores), || {
        "l = h changed the record".into()
    })?;

    // prompt of 2: row 2 and column 2 touch the dialogue span
    let split = SegmentMap::new(2, 1);
    let mut guarded = rec.clone();
    apply_amplification(&mut guarded, &full, l, h, &split, false).map_err(err)?;
    let mut touched = 0;
    for i in 0..3 {
        for j in 0..=i {
            if split.excluded(i, j) {
                touched += 1;
                ensure(
                    guarded.scores.get(i, j).to_bits() == rec.scores.get(i, j).to_bits(),
                    || format!("protected entry ({i},{j}) changed"),
                )?;
            }
        }
    }
    ensure(guarded.scores.get(1, 0) != rec.scores.get(1, 0), || {
        "unprotected entry left unchanged".into()
    })?;
    Ok(format!(
        "A'={got:.7}, l=h identity, {touched} protected entries bit-identical"
    ))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 2

fn causal_record() -> impl Strategy<Value = AttentionRecord> {
    (1usize..12)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(0.001f64..1.0, n * n),
                any::<bool>(),
            )
        })
        .prop_map(|(n, w, peaked)| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                // a fourth power on some cases gives sharper rows
                let row: Vec<f64> = w[i * n..=i * n + i]
                    .iter()
                    .map(|&v| if peaked { v.powi(4) } else { v })
                    .collect();
                let s: f64 = row.iter().sum();
                for (j, v) in row.iter().enumerate() {
                    t.set(i, j, v / s);
                }
            }
            AttentionRecord::new(0, 0, 0, t).unwrap()
        })
}

/// Record, prompt length, anchor bits, recent window, top-k, h.
fn case() -> impl Strategy<Value = (AttentionRecord, usize, u32, usize, usize, usize)> {
    (
        causal_record(),
        0usize..12,
        any::<u32>(),
        1usize..5,
        1usize..6,
        2usize..32,
    )
}

fn anchors_in(prompt_len: usize, bits: u32) -> BTreeSet<usize> {
    (0..prompt_len).filter(|j| bits >> j & 1 == 1).collect()
}

type Op<'a> = Box<dyn Fn(&mut AttentionRecord) + 'a>;

fn zeroing_ops<'a>(
    anchors: &'a BTreeSet<usize>,
    seg: &'a SegmentMap,
    w: usize,
    renorm: bool,
) -> Vec<(&'static str, Op<'a>)> {
    vec![
        (
            "zero_non_anchor_prompt",
            Box::new(move |r| apply_zero_non_anchor_prompt(r, anchors, seg, renorm).unwrap()),
        ),
        (
            "zero_anchor_prompt",
            Box::new(move |r| apply_zero_anchor_prompt(r, anchors, seg, renorm).unwrap()),
        ),
        (
            "zero_recent",
            Box::new(move |r| {
                apply_zero_recent(r, w, renorm).unwrap();
            }),
        ),
        (
            "zero_prompt",
            Box::new(move |r| apply_zero_prompt(r, seg, renorm)),
        ),
    ]
}

fn row_sums(rec: &AttentionRecord) -> Vec<f64> {
    (0..rec.rows())
        .map(|r| rec.scores.row(r).iter().sum())
        .collect()
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&strategy, test)
        .map_err(|e| format!("{name}: {e}"))
}

fn invariant_suite() -> Outcome {
    let mut names = Vec::new();

    names.push("causality");
    run_property(
        "causality",
        (case(), any::<bool>()),
        |((rec, p, bits, w, k, h), renorm)| {
            let n = rec.rows();
            let seg = SegmentMap::new(p.min(n), 1);
            let anchors = anchors_in(seg.prompt_len, bits);
            for (op_name, op) in zeroing_ops(&anchors, &seg, w, renorm) {
                let mut out = rec.clone();
                op(&mut out);
                prop_assert!(out.is_causal(), "{} broke causality", op_name);
            }
            let mask = build_pattern_mask(&rec.scores, 0, 0, MaskRule::TopK(k)).unwrap();
            for l in 1..=h {
                let mut out = rec.clone();
                apply_amplification(&mut out, &mask, l, h, &seg, renorm).unwrap();
                prop_assert!(out.is_causal());
            }
            Ok(())
        },
    )?;

    names.push("row-stochastic after renormalization");
    run_property("row sums", case(), |(rec, p, bits, w, k, h)| {
        let n = rec.rows();
        let seg = SegmentMap::new(p.min(n), 1);
        let anchors = anchors_in(seg.prompt_len, bits);
        for (op_name, op) in zeroing_ops(&anchors, &seg, w, true) {
            let mut out = rec.clone();
            op(&mut out);
            for (r, sum) in row_sums(&out).into_iter().enumerate() {
                // a row whose every key was removed has nothing to renormalize
                let emptied = out.scores.row(r).iter().all(|&v| v == 0.0);
                prop_assert!(
                    emptied || (sum - 1.0).abs() < 1e-9,
                    "{} row {} sums to {}",
                    op_name,
                    r,
                    sum
                );
                prop_assert!(
                    !(emptied && op_name == "zero_recent"),
                    "zero_recent left row {} empty",
                    r
                );
            }
        }
        let mask = build_pattern_mask(&rec.scores, 0, 0, MaskRule::TopK(k)).unwrap();
        for l in 1..=h {
            let mut out = rec.clone();
            apply_amplification(&mut out, &mask, l, h, &seg, true).unwrap();
            for sum in row_sums(&out) {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        Ok(())
    })?;

    names.push("zero-mask identity");
    run_property(
        "zero mask",
        (case(), any::<bool>()),
        |((rec, p, _, _, _, h), renorm)| {
            let n = rec.rows();
            let seg = SegmentMap::new(p.min(n), 1);
            let zero = PatternMask {
                source_layer: 0,
                row_offset: 0,
                mask: Tensor::zeros(&[n, n]),
            };
            for l in 1..=h {
                let mut out = rec.clone();
                apply_amplification(&mut out, &zero, l, h, &seg, renorm).unwrap();
                prop_assert_eq!(bits(&out.scores), bits(&rec.scores));
            }
            Ok(())
        },
    )?;

    names.push("idempotent zeroing");
    run_property(
        "idempotence",
        (case(), any::<bool>()),
        |((rec, p, bits_, w, _, _), renorm)| {
            let n = rec.rows();
            let seg = SegmentMap::new(p.min(n), 1);
            let anchors = anchors_in(seg.prompt_len, bits_);
            for (op_name, op) in zeroing_ops(&anchors, &seg, w, renorm) {
                let mut once = rec.clone();
                op(&mut once);
                let mut twice = once.clone();
                op(&mut twice);
                prop_assert_eq!(
                    bits(&once.scores),
                    bits(&twice.scores),
                    "{} is not idempotent",
                    op_name
                );
            }
            Ok(())
        },
    )?;

    names.push("decay monotone in l");
    run_property("monotonicity", case(), |(rec, p, _, _, k, h)| {
        let n = rec.rows();
        let seg = SegmentMap::new(p.min(n), 1);
        let mask = build_pattern_mask(&rec.scores, 0, 0, MaskRule::TopK(k)).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for l in 1..=h {
            let mut out = rec.clone();
            apply_amplification(&mut out, &mask, l, h, &seg, false).unwrap();
            let change: Vec<f64> = out
                .scores
                .data()
                .iter()
                .zip(rec.scores.data())
                .map(|(a, b)| (a - b).abs())
                .collect();
            if let Some(prev) = &prev {
                for (c, q) in change.iter().zip(prev) {
                    prop_assert!(c <= q, "change grew from {} to {} at l={}", q, c, l);
                }
            }
            prev = Some(change);
        }
        Ok(())
    })?;

    names.push("raw row sums in [1, 2]");
    run_property("raw sums", case(), |(rec, p, _, _, k, h)| {
        let n = rec.rows();
        let seg = SegmentMap::new(p.min(n), 1);
        let mask = build_pattern_mask(&rec.scores, 0, 0, MaskRule::TopK(k)).unwrap();
        for l in 1..=h {
            let mut out = rec.clone();
            apply_amplification(&mut out, &mask, l, h, &seg, false).unwrap();
            for sum in row_sums(&out) {
                prop_assert!(
                    (1.0 - 1e-12..=2.0 + 1e-12).contains(&sum),
                    "row sum {} at l={}",
                    sum,
                    l
                );
            }
        }
        Ok(())
    })?;

    Ok(format!(
        "{} invariants x {CASES} cases: {}",
        names.len(),
        names.join(", ")
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_check() -> Outcome {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_seq: 32,
        ..ModelConfig::default()
    };
    let mut model = Model::init(config, 11).map_err(err)?;
    // Raw init gradients sit close to rounding noise at eps = 1e-5; larger
    // weights and non-unit norm gains give every family a measurable signal.
    let names = ModelWeights::names(&config);
    for (i, (name, t)) in names.iter().zip(model.weights.tensors_mut()).enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            if name.ends_with("norm") {
                *v += 0.25 * (((i * 31 + j * 7) % 11) as f64 / 5.0 - 1.0);
            } else {
                *v *= 25.0;
            }
        }
    }
    let tokens: Vec<u32> = [256u32]
        .into_iter()
        .chain("a>c c>b q:a>>?".bytes().map(u32::from))
        .chain([257])
        .collect();
    let epsilon = 1e-5;
    let report = grad_check(&model, &tokens, epsilon, names.len() * 6, 5).map_err(err)?;
    let expected: BTreeSet<&str> = [
        "tok_embedding",
        "attn_norm",
        "wq",
        "wk",
        "wv",
        "wo",
        "ffn_norm",
        "w_gate",
        "w_up",
        "w_down",
        "final_norm",
        "lm_head",
    ]
    .into_iter()
    .collect();
    let covered: BTreeSet<&str> = report.per_family.keys().map(String::as_str).collect();
    ensure(covered == expected, || {
        format!("families covered {covered:?}, expected {expected:?}")
    })?;
    let nonzero = report
        .samples
        .iter()
        .filter(|s| s.analytic.abs() > 1e-6)
        .count();
    ensure(nonzero * 2 >= report.samples.len(), || {
        format!(
            "only {nonzero} of {} sampled gradients are non-negligible",
            report.samples.len()
        )
    })?;
    let (worst_family, worst) = report
        .per_family
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(f, e)| (f.clone(), *e))
        .unwrap_or_default();
    ensure(report.max_rel_error < 1e-4, || {
        format!(
            "max relative error {:.3e} in {worst_family}",
            report.max_rel_error
        )
    })?;
    Ok(format!(
        "{} samples over {} families, max rel error {:.2e} ({worst_family}) at eps={epsilon:e}",
        report.samples.len(),
        covered.len(),
        worst
    ))
}

// ---------------------------------------------------------------- 4, 7, 8

struct Workspace {
    root: PathBuf,
}

struct Trained {
    weights: PathBuf,
    summary: String,
}

fn attnlab(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot run attnlab: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "attnlab {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

impl Workspace {
    fn new(root: &Path) -> Self {
        std::fs::write(root.join("toy.json"), TOY_CONFIG).expect("write config");
        std::fs::write(root.join("amplify.json"), AMPLIFY_SPEC).expect("write spec");
        Self {
            root: root.to_path_buf(),
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self) -> Result<Trained, String> {
        let out = self.dir("train");
        let started = Instant::now();
        attnlab(&[
            "train",
            "--config",
            p(&self.dir("toy.json")),
            "--out-dir",
            p(&out),
        ])?;
        let seconds = started.elapsed().as_secs_f64();
        let curve = std::fs::read_to_string(out.join("loss_curve.csv")).map_err(err)?;
        let losses: Vec<f64> = curve
            .lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| format!("bad curve line {l:?}"))
            })
            .collect::<Result<_, _>>()?;
        ensure(losses.len() == TRAIN_STEPS, || {
            format!("{} losses for {TRAIN_STEPS} steps", losses.len())
        })?;
        let tail = &losses[losses.len() - LOSS_WINDOW..];
        let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
        let first_below = losses.iter().position(|&l| l < TARGET_NATS).map(|s| s + 1);

        let weights = out.join("model.atnf");
        let model = Model::load(&weights).map_err(err)?;
        // items from another seed: unseen facts and a different symbol cycle
        let unseen = generate_dataset(&DatasetConfig {
            seed: 1,
            n_items: 50,
            n_train: 0,
            ..DatasetConfig::default()
        })
        .map_err(err)?;
        let seqs: Vec<Vec<u32>> = unseen
            .items
            .iter()
            .map(|i| i.cot_sequence(DEFAULT_COT_CUE))
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let held_out = mean_loss(&model, &refs).map_err(err)?;

        ensure(final_loss < TARGET_NATS, || {
            format!("mean loss of the last {LOSS_WINDOW} steps is {final_loss:.4}")
        })?;
        ensure(seconds < TRAIN_TIME_LIMIT_S, || {
            format!("training took {seconds:.0}s")
        })?;
        Ok(Trained {
            weights,
            summary: format!(
                "{TRAIN_STEPS} steps in {seconds:.0}s, first batch below {TARGET_NATS} at step {}, last-{LOSS_WINDOW} mean {final_loss:.4} nats/token, unseen-seed CoT loss {held_out:.4}; determinism checked by replay in 8",
                first_below.map_or("-".into(), |s| s.to_string())
            ),
        })
    }

    fn eval(&self, weights: &Path) -> Outcome {
        let out = self.dir("eval");
        let stdout = attnlab(&[
            "eval",
            "--weights",
            p(weights),
            "--config",
            p(&self.dir("toy.json")),
            "--spec",
            p(&self.dir("amplify.json")),
            "--out-dir",
            p(&out),
        ])?;
        let items: Vec<EvalItem> = read_jsonl(&out.join("items.jsonl")).map_err(err)?;
        let outcomes: Vec<EvalOutcome> = read_jsonl(&out.join("outcomes.jsonl")).map_err(err)?;
        ensure(items.len() >= 200, || format!("only {} items", items.len()))?;
        for o in &outcomes {
            ensure(o.generated_tokens == o.output_len - o.prompt_len, || {
                format!(
                    "{} {}: generated {} but output-prompt = {}",
                    o.item_id,
                    o.mode.name(),
                    o.generated_tokens,
                    o.output_len - o.prompt_len
                )
            })?;
        }
        let csv = std::fs::read_to_string(out.join("token_lengths.csv")).map_err(err)?;
        let modes: Vec<&str> = csv
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').next())
            .collect();
        ensure(modes == ["early", "cot", "cot_intervened"], || {
            format!("token-length modes {modes:?}")
        })?;
        std::fs::read_to_string(out.join("report.json")).map_err(err)?;
        let cell = |mode: &str| {
            csv.lines()
                .find(|l| l.starts_with(&format!("{mode},")))
                .and_then(|l| l.split(',').nth(1))
                .and_then(|v| v.parse::<f64>().ok())
                .map_or("n/a".to_string(), |v| format!("{v:.2}"))
        };
        let counts = |mode: Mode| outcomes.iter().filter(|o| o.mode == mode).count();
        let summary_line = stdout.lines().next().unwrap_or("").to_string();
        Ok(format!(
            "{} items, {} outcomes (early {}, cot {}, intervened {}) all consistent; mean tokens cot {} vs intervened {} (reported only); {summary_line}",
            items.len(),
            outcomes.len(),
            counts(Mode::Early),
            counts(Mode::Cot),
            counts(Mode::CotIntervened),
            cell("cot"),
            cell("cot_intervened"),
        ))
    }

    /// Re-runs every manifest written so far plus fresh dump, intervene and
    /// anchor reports, and compares the replayed directories file by file.
    fn replays(&self, weights: &Path) -> Outcome {
        let text = "a>c c>e e>b\nq:a>>?\n";
        attnlab(&[
            "attn-dump",
            "--weights",
            p(weights),
            "--text",
            text,
            "--bos",
            "--capture-heads",
            "--out-dir",
            p(&self.dir("dump")),
        ])?;
        attnlab(&[
            "intervene",
            "--weights",
            p(weights),
            "--text",
            text,
            "--bos",
            "--spec",
            p(&self.dir("amplify.json")),
            "--out-dir",
            p(&self.dir("intervene")),
        ])?;
        attnlab(&[
            "report",
            "anchors",
            "--weights",
            p(weights),
            "--corpus",
            p(&self.dir("train/corpus.jsonl")),
            "--layers",
            "2",
            "--max-seqs",
            "8",
            "--out-dir",
            p(&self.dir("anchors")),
        ])?;
        let mut total = 0;
        let mut runs = Vec::new();
        for name in ["train", "dump", "intervene", "anchors", "eval"] {
            let original = self.dir(name);
            let replayed = self.dir(&format!("{name}_replay"));
            attnlab(&[
                "replay",
                "--manifest",
                p(&original.join("manifest.json")),
                "--out-dir",
                p(&replayed),
            ])?;
            let files = compare_dirs(&original, &replayed)?;
            ensure(
                files.iter().any(|f| f.ends_with(".pgm")) || !matches!(name, "dump" | "intervene"),
                || format!("{name} emitted no heatmaps"),
            )?;
            total += files.len();
            runs.push(format!("{name} {}", files.len()));
        }
        Ok(format!(
            "{total} files byte-identical after replay ({})",
            runs.join(", ")
        ))
    }
}

fn compare_dirs(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let list = |d: &Path| -> Result<Vec<String>, String> {
        let mut names: Vec<String> = std::fs::read_dir(d)
            .map_err(err)?
            .map(|e| {
                e.map(|e| e.file_name().to_string_lossy().into_owned())
                    .map_err(err)
            })
            .collect::<Result<_, _>>()?;
        names.sort();
        Ok(names)
    };
    let names = list(a)?;
    ensure(names == list(b)?, || {
        format!("{} and {} hold different files", a.display(), b.display())
    })?;
    for n in &names {
        let same =
            std::fs::read(a.join(n)).map_err(err)? == std::fs::read(b.join(n)).map_err(err)?;
        ensure(same, || {
            format!("{n} differs after replay of {}", a.display())
        })?;
    }
    Ok(names)
}

// ---------------------------------------------------------------- 5

/// Pooled perplexity of the reference reasoning (every token after the CoT
/// prompt) under a pipeline built per item.
fn continuation_perplexity(
    model: &Model,
    items: &[EvalItem],
    specs: &[InterventionSpec],
) -> Result<f64, String> {
    let (mut nll, mut count) = (0.0, 0usize);
    for item in items {
        let tokens = item.cot_sequence(DEFAULT_COT_CUE);
        let prompt_len = item.cot_prompt(DEFAULT_COT_CUE).len();
        let mut pipeline = Pipeline::new(specs, &model.config, prompt_len).map_err(err)?;
        let hook = (!specs.is_empty()).then_some(&mut pipeline as &mut dyn AttentionHook);
        let out = model.forward(&tokens, None, false, hook).map_err(err)?;
        for t in prompt_len - 1..tokens.len() - 1 {
            let row = out.logits.row(t);
            nll += log_sum_exp(row) - row[tokens[t + 1] as usize];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

fn perplexity_directions(weights: &Path) -> Outcome {
    let model = Model::load(weights).map_err(err)?;
    let top = model.config.max_layer();
    let items = generate_dataset(&DatasetConfig {
        n_items: PPL_ITEMS,
        ..DatasetConfig::default()
    })
    .map_err(err)?
    .items;
    let spec = |kind, start, end| InterventionSpec::new(kind, LayerRange::new(start, end));
    let zero_recent = spec(InterventionKind::ZeroRecent, 0, top).with_params(InterventionParams {
        recent_window: Some(RECENT_WINDOW),
        ..InterventionParams::default()
    });
    // layers after the early pair, alternation starting at the lower bound
    let middle = spec(InterventionKind::ZeroPromptAlternating, 2, top);
    let early = [
        spec(InterventionKind::ZeroPromptAlternating, 0, 0),
        spec(InterventionKind::ZeroPromptAlternating, 1, 1),
    ];

    let base = continuation_perplexity(&model, &items, &[])?;
    let recent = continuation_perplexity(&model, &items, &[zero_recent])?;
    let mid = continuation_perplexity(&model, &items, &[middle.clone()])?;
    let first = continuation_perplexity(&model, &items, &early)?;
    let mid_layers = middle.active_layers(top).map_err(err)?;
    let detail = format!(
        "baseline {base:.4}, zero_recent(w={RECENT_WINDOW}) {recent:.4}, prompt zeroed on layers {mid_layers:?} {mid:.4}, on layers [0, 1] {first:.4}"
    );
    ensure(recent >= base, || {
        format!("zero_recent lowered perplexity: {detail}")
    })?;
    ensure(mid <= 2.0 * base, || {
        format!("middle-layer zeroing exceeds 2x baseline: {detail}")
    })?;
    ensure(first > mid, || {
        format!("early-layer zeroing not worse than middle: {detail}")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn fixture_item(i: usize) -> EvalItem {
    let category = match i {
        0..=7 => Category::Recall,
        8..=13 => Category::Chain2,
        _ => Category::Chain3,
    };
    EvalItem {
        id: format!("fx-{i:02}"),
        category,
        prompt_tokens: vec![256, 97 + (i as u32 % 26)],
        choices: ["a", "b", "c", "d"].map(String::from).to_vec(),
        gold: 0,
        solvable_by_lookup: category == Category::Recall,
        reference_cot: String::new(),
    }
}

fn fixture_outcome(
    item: &EvalItem,
    mode: Mode,
    predicted: Option<usize>,
    generated: usize,
) -> EvalOutcome {
    EvalOutcome {
        item_id: item.id.clone(),
        mode,
        predicted,
        correct: predicted == Some(item.gold),
        generated_tokens: generated,
        prompt_len: 10,
        output_len: 10 + generated,
        generated_text: String::new(),
    }
}

fn pipeline_methodology() -> Outcome {
    let items: Vec<EvalItem> = (0..20).map(fixture_item).collect();
    let early_right = [0, 1, 2, 3, 8, 9, 14];
    let mut outcomes: Vec<EvalOutcome> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let predicted = match i {
                _ if early_right.contains(&i) => Some(0),
                4 => None,
                _ => Some(1),
            };
            fixture_outcome(item, Mode::Early, predicted, 1)
        })
        .collect();

    let filtered = filter_uniquely_solvable(&outcomes, &items).map_err(err)?;
    let ids: Vec<&str> = filtered.iter().map(|i| i.id.as_str()).collect();
    let unsolved = [
        "fx-04", "fx-05", "fx-06", "fx-07", "fx-10", "fx-11", "fx-12", "fx-13", "fx-15", "fx-16",
        "fx-17", "fx-18", "fx-19",
    ];
    ensure(ids == unsolved, || format!("filtered {ids:?}"))?;

    // CoT solves 4, 6, 10, 15, 16 with 10, 20, 30, 40, 50 tokens
    let solved = [(4, 10), (6, 20), (10, 30), (15, 40), (16, 50)];
    for item in &filtered {
        let i: usize = item.id[3..].parse().unwrap();
        let hit = solved.iter().find(|(k, _)| *k == i);
        outcomes.push(match hit {
            Some(&(_, n)) => fixture_outcome(item, Mode::Cot, Some(0), n),
            None => fixture_outcome(item, Mode::Cot, Some(2), 99),
        });
    }
    let report = summarize(&outcomes, &items).map_err(err)?;

    // (category, n, early correct, filtered, cot correct, mean, median)
    let expected = [
        ("recall", 8, 4, 4, 2, 15.0, 15.0),
        ("chain2", 6, 2, 4, 1, 30.0, 30.0),
        ("chain3", 6, 1, 5, 2, 45.0, 45.0),
        ("overall", 20, 7, 13, 5, 30.0, 30.0),
    ];
    for (name, n, early, filt, cot, mean, median) in expected {
        let cat = if name == "overall" {
            &report.overall
        } else {
            report
                .categories
                .get(name)
                .ok_or_else(|| format!("no {name} category"))?
        };
        let c = cat
            .cot
            .get("cot")
            .ok_or_else(|| format!("{name}: no cot stats"))?;
        let got = (
            cat.n_items,
            cat.early.correct,
            cat.filtered,
            c.n,
            c.correct,
            c.mean_tokens,
            c.median_tokens,
        );
        let want = (n, early, filt, filt, cot, Some(mean), Some(median));
        ensure(got == want, || {
            format!("{name}: got {got:?}, want {want:?}")
        })?;
        ensure(cat.early.accuracy == Some(early as f64 / n as f64), || {
            format!("{name}: early accuracy {:?}", cat.early.accuracy)
        })?;
        ensure(c.accuracy == Some(cot as f64 / filt as f64), || {
            format!("{name}: cot accuracy {:?}", c.accuracy)
        })?;
    }
    Ok("13 unsolved of 20 recovered exactly; early 7/20, uniquely solved 5/13, mean tokens 30 match hand counts per category".into())
}
