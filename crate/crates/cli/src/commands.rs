use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use attnlab::evalharness::{
    self, filter_uniquely_solvable, generate_dataset, read_jsonl, run_cot, run_early_answer,
    summarize, write_jsonl, EvalItem, EvalOutcome, EvalReport,
};
use attnlab::interventions::{
    read_specs, resolve_anchors, AppliedSpec, InterventionSpec, Pipeline,
};
use attnlab::model::tokenizer::{
    detokenize_bytes, read_token_stream, tokenize, write_token_stream, BOS, EOS,
};
use attnlab::model::{layer_mean, AttentionHook, AttentionRecord, Model, ModelConfig};
use attnlab::report::{
    anchor_frequency_report, export_diff, export_heatmap, parse_matrix_csv, sha256_file,
    token_length_csv, RunManifest, MANIFEST_FILE,
};
use attnlab::trainer::{train_with_progress, write_loss_curve};
use attnlab::Tensor;
use serde_json::json;
use thiserror::Error;

use crate::config::FileConfig;
use crate::{
    AnchorArgs, Command, DiffArgs, DumpArgs, EvalArgs, GenerateArgs, InputArgs, InterveneArgs,
    OutArgs, ReplayArgs, ReportKind, SummaryArgs, TrainArgs, EXIT_DATA, EXIT_USAGE,
};

pub const WEIGHTS_FILE: &str = "model.atnf";
const PROGRESS_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] attnlab::Error),
    #[error("replay mismatch in {0:?}")]
    Replay(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Replay(_) => EXIT_DATA,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one parsed command. `argv` is the full argument list after the
/// program name, used for the manifest.
pub fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    let (name, args) = split_argv(argv);
    match command {
        Command::Train(a) => train(a, &name, args),
        Command::Generate(a) => generate(a, &name, args),
        Command::AttnDump(a) => attn_dump(a, &name, args),
        Command::Intervene(a) => intervene(a, &name, args),
        Command::Eval(a) => eval(a, &name, args),
        Command::Report(r) => match r.kind {
            ReportKind::Anchors(a) => report_anchors(a, &name, args),
            ReportKind::Diff(a) => report_diff(a, &name, args),
            ReportKind::Summary(a) => report_summary(a, &name, args),
        },
        Command::Replay(a) => replay(a),
    }
}

/// Splits off the subcommand words (`report` takes a second one) and drops
/// `--out-dir` so that a manifest does not depend on where it was written.
fn split_argv(argv: &[String]) -> (String, Vec<String>) {
    let words = match argv.first().map(String::as_str) {
        Some("report") => 2,
        _ => 1,
    }
    .min(argv.len());
    let name = argv[..words].join(" ");
    let mut args = Vec::new();
    let mut rest = argv[words..].iter();
    while let Some(a) = rest.next() {
        if a == "--out-dir" {
            rest.next();
        } else if !a.starts_with("--out-dir=") {
            args.push(a.clone());
        }
    }
    (name, args)
}

struct Run {
    out_dir: PathBuf,
    manifest: RunManifest,
    files: Vec<PathBuf>,
}

impl Run {
    fn start(
        out: &OutArgs,
        command: &str,
        args: Vec<String>,
        config: serde_json::Value,
    ) -> CliResult<Self> {
        std::fs::create_dir_all(&out.out_dir)?;
        Ok(Self {
            out_dir: out.out_dir.clone(),
            manifest: RunManifest {
                command: command.to_string(),
                args,
                config,
                weights_sha256: None,
                interventions: Vec::new(),
                seeds: BTreeMap::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                outputs: Vec::new(),
            },
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }

    fn weights(&mut self, path: &Path) -> CliResult<Model> {
        if !path.is_file() {
            return Err(CliError::Data(attnlab::Error::Config(format!(
                "weights file {} not found",
                path.display()
            ))));
        }
        self.manifest.weights_sha256 = Some(sha256_file(path)?);
        Ok(Model::load(path)?)
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.record_outputs(&self.out_dir, &self.files)?;
        let path = self.manifest.write(&self.out_dir)?;
        println!("wrote {} outputs and {}", self.files.len(), path.display());
        Ok(())
    }
}

fn load_config(out: &OutArgs) -> CliResult<FileConfig> {
    Ok(FileConfig::load(out.config.as_deref())?)
}

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CliError::Data(e.into()))
}

fn train(a: TrainArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut cfg = load_config(&a.out)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.dataset.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(p) = a.dropout {
        cfg.train.attn_output_dropout = p;
    }
    let mut run = Run::start(
        &a.out,
        name,
        args,
        json!({ "model": to_value(&cfg.model)?, "train": to_value(&cfg.train)?, "dataset": to_value(&cfg.dataset)? }),
    )?;
    run.manifest.seeds.insert("train".into(), cfg.train.seed);
    let corpus = match &a.corpus {
        Some(p) => read_token_stream(p)?,
        None => {
            run.manifest
                .seeds
                .insert("dataset".into(), cfg.dataset.seed);
            let data = generate_dataset(&cfg.dataset)?;
            write_token_stream(&run.path("corpus.jsonl"), &data.corpus)?;
            run.files.push(run.path("corpus.jsonl"));
            data.corpus
        }
    };
    let model = match &a.weights {
        Some(p) => run.weights(p)?,
        None => Model::init(cfg.model, cfg.train.seed)?,
    };
    let (trained, losses) = train_with_progress(&model, &corpus, &cfg.train, |step, loss| {
        if (step + 1) % PROGRESS_EVERY == 0 {
            eprintln!("step {:>5} loss {loss:.4}", step + 1);
        }
    })?;
    trained.save(run.path(WEIGHTS_FILE))?;
    run.files.push(run.path(WEIGHTS_FILE));
    write_loss_curve(&run.path("loss_curve.csv"), &losses)?;
    run.files.push(run.path("loss_curve.csv"));
    run.finish()
}

fn prompt_tokens(text: &str, bos: bool) -> Vec<u32> {
    let mut tokens = Vec::new();
    if bos {
        tokens.push(BOS);
    }
    tokens.extend(tokenize(text));
    tokens
}

fn load_specs(path: Option<&Path>) -> CliResult<Vec<InterventionSpec>> {
    match path {
        Some(p) => Ok(read_specs(p)?),
        None => Ok(Vec::new()),
    }
}

fn generate(a: GenerateArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut run = Run::start(&a.out, name, args, json!({ "max_new": a.max_new }))?;
    let model = run.weights(&a.weights)?;
    let prompt = prompt_tokens(&a.prompt, a.bos);
    let specs = resolve_anchors(
        &model,
        &prompt,
        prompt.len(),
        &load_specs(a.spec.as_deref())?,
    )?;
    let mut pipeline = Pipeline::new(&specs, &model.config, prompt.len())?;
    let hook = (!pipeline.is_empty()).then_some(&mut pipeline as &mut dyn AttentionHook);
    let (output, generated) = model.generate_greedy(&prompt, a.max_new, &[EOS], hook)?;
    let text = String::from_utf8_lossy(&detokenize_bytes(&output[prompt.len()..])?).into_owned();
    run.manifest.interventions = pipeline.applied().to_vec();
    let record = json!({
        "prompt_tokens": prompt,
        "output_tokens": output,
        "generated_tokens": generated,
        "text": text,
    });
    run.write(
        "generation.json",
        serde_json::to_string_pretty(&record).expect("json value") + "\n",
    )?;
    println!("{text}");
    run.finish()
}

/// Parses `0,2-3` into a layer set bounded by `n_layers`.
pub fn parse_layers(spec: &str, n_layers: usize) -> CliResult<BTreeSet<usize>> {
    let bad = |part: &str| CliError::Usage(format!("--layers: cannot parse {part:?}"));
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((lo, hi)) => (lo.trim(), hi.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| bad(part))?;
        let hi: usize = hi.parse().map_err(|_| bad(part))?;
        if lo > hi || hi >= n_layers {
            return Err(CliError::Usage(format!(
                "--layers: {part:?} is not a range inside 0..{n_layers}"
            )));
        }
        out.extend(lo..=hi);
    }
    if out.is_empty() {
        return Err(CliError::Usage("--layers: no layers given".into()));
    }
    Ok(out)
}

fn input_tokens(input: &InputArgs) -> CliResult<Vec<u32>> {
    let tokens = match (&input.text, &input.tokens) {
        (Some(t), _) => prompt_tokens(t, input.bos),
        (None, Some(json)) => serde_json::from_str(json).map_err(|e| {
            CliError::Usage(format!("--tokens: expected a JSON array of ids ({e})"))
        })?,
        (None, None) => {
            return Err(CliError::Usage(
                "one of --text or --tokens is required".into(),
            ))
        }
    };
    if tokens.is_empty() {
        return Err(CliError::Usage("input sequence is empty".into()));
    }
    Ok(tokens)
}

fn selected_layers(input: &InputArgs, config: &ModelConfig) -> CliResult<BTreeSet<usize>> {
    match &input.layers {
        Some(s) => parse_layers(s, config.n_layers),
        None => Ok((0..config.n_layers).collect()),
    }
}

/// Heatmaps for the selected layers: head means, or every head.
fn heatmaps(
    records: &[AttentionRecord],
    layers: &BTreeSet<usize>,
    heads: bool,
) -> CliResult<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for &layer in layers {
        let of_layer: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == layer).collect();
        if heads {
            for r in of_layer {
                out.push((format!("layer{layer}_head{}", r.head), r.scores.clone()));
            }
        } else {
            out.push((format!("layer{layer}_mean"), layer_mean(&of_layer)?));
        }
    }
    Ok(out)
}

fn export_all(run: &mut Run, maps: &[(String, Tensor)], prefix: &str) -> CliResult<()> {
    for (base, scores) in maps {
        let paths = export_heatmap(scores, &run.path(&format!("{prefix}{base}")))?;
        run.files.extend(paths);
    }
    Ok(())
}

fn input_config(input: &InputArgs, tokens: &[u32]) -> serde_json::Value {
    json!({ "tokens": tokens, "capture": if input.capture_heads { "heads" } else { "mean" } })
}

fn attn_dump(a: DumpArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let tokens = input_tokens(&a.input)?;
    let mut run = Run::start(&a.out, name, args, input_config(&a.input, &tokens))?;
    let model = run.weights(&a.input.weights)?;
    let layers = selected_layers(&a.input, &model.config)?;
    let out = model.forward(&tokens, None, true, None)?;
    let maps = heatmaps(&out.records, &layers, a.input.capture_heads)?;
    export_all(&mut run, &maps, "")?;
    run.finish()
}

fn intervene(a: InterveneArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let tokens = input_tokens(&a.input)?;
    let prompt_len = a.prompt_len.unwrap_or(tokens.len());
    let mut config = input_config(&a.input, &tokens);
    config["prompt_len"] = json!(prompt_len);
    let mut run = Run::start(&a.out, name, args, config)?;
    let model = run.weights(&a.input.weights)?;
    let layers = selected_layers(&a.input, &model.config)?;
    let specs = resolve_anchors(&model, &tokens, prompt_len, &read_specs(&a.spec)?)?;
    let mut pipeline = Pipeline::new(&specs, &model.config, prompt_len)?;

    let base = model.forward(&tokens, None, true, None)?;
    let hooked = model.forward(&tokens, None, true, Some(&mut pipeline))?;
    let base_maps = heatmaps(&base.records, &layers, a.input.capture_heads)?;
    let maps = heatmaps(&hooked.records, &layers, a.input.capture_heads)?;
    export_all(&mut run, &maps, "")?;
    for ((b, before), (_, after)) in base_maps.iter().zip(&maps) {
        let paths = export_diff(after, before, &run.path(&format!("diff_{b}")))?;
        run.files.extend(paths);
    }
    run.manifest.interventions = pipeline.applied().to_vec();

    if tokens.len() >= 2 {
        let baseline = model.perplexity(&tokens, None)?;
        let mut fresh = Pipeline::new(&specs, &model.config, prompt_len)?;
        let intervened = model.perplexity(&tokens, Some(&mut fresh))?;
        let record = json!({ "baseline": baseline, "intervened": intervened, "ratio": intervened / baseline });
        run.write(
            "perplexity.json",
            serde_json::to_string_pretty(&record).expect("json value") + "\n",
        )?;
    }
    run.finish()
}

fn write_eval_reports(
    run: &mut Run,
    outcomes: &[EvalOutcome],
    items: &[EvalItem],
) -> CliResult<EvalReport> {
    let report = summarize(outcomes, items)?;
    run.write("report.json", report.to_json()?)?;
    run.write("report.csv", report.to_csv())?;
    run.write("token_lengths.csv", token_length_csv(&report))?;
    Ok(report)
}

fn eval(a: EvalArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut cfg = load_config(&a.out)?;
    if let Some(b) = a.budget {
        cfg.eval.budget = b;
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = a.n_items {
        cfg.dataset.n_items = n;
    }
    let mut run = Run::start(
        &a.out,
        name,
        args,
        json!({ "dataset": to_value(&cfg.dataset)?, "eval": to_value(&cfg.eval)? }),
    )?;
    let model = run.weights(&a.weights)?;
    let items = match &a.items {
        Some(p) => read_jsonl::<EvalItem>(p)?,
        None => {
            run.manifest
                .seeds
                .insert("dataset".into(), cfg.dataset.seed);
            generate_dataset(&cfg.dataset)?.items
        }
    };
    let specs = load_specs(a.spec.as_deref())?;
    let max_layer = model.config.max_layer();
    for s in &specs {
        s.validate(max_layer)?;
    }
    run.manifest.interventions = specs
        .iter()
        .map(|s| {
            Ok(AppliedSpec {
                spec: s.resolved(),
                applied_layers: s.active_layers(max_layer)?.into_iter().collect(),
                degenerate_rows: 0,
            })
        })
        .collect::<attnlab::Result<_>>()?;

    let cue = cfg.dataset.cot_cue.clone();
    let mut outcomes = run_early_answer(&model, &items, &[])?;
    let filtered = filter_uniquely_solvable(&outcomes, &items)?;
    outcomes.extend(run_cot(&model, &filtered, &[], cfg.eval.budget, &cue)?);
    if !specs.is_empty() {
        outcomes.extend(run_cot(&model, &filtered, &specs, cfg.eval.budget, &cue)?);
    }
    write_jsonl(&run.path("items.jsonl"), &items)?;
    run.files.push(run.path("items.jsonl"));
    write_jsonl(&run.path("outcomes.jsonl"), &outcomes)?;
    run.files.push(run.path("outcomes.jsonl"));
    let report = write_eval_reports(&mut run, &outcomes, &items)?;
    let o = &report.overall;
    println!(
        "{} items: early {:.3}, filtered {}",
        o.n_items,
        o.early.accuracy.unwrap_or(f64::NAN),
        o.filtered
    );
    for (mode, stats) in &o.cot {
        println!(
            "{mode}: accuracy {:.3} mean tokens {}",
            stats.accuracy.unwrap_or(f64::NAN),
            stats.mean_tokens.map_or("-".into(), |m| format!("{m:.2}"))
        );
    }
    run.finish()
}

fn report_anchors(a: AnchorArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut run = Run::start(&a.out, name, args, json!({ "max_seqs": a.max_seqs }))?;
    let model = run.weights(&a.weights)?;
    let layers = parse_layers(&a.layers, model.config.n_layers)?;
    if layers.len() != 1 {
        return Err(CliError::Usage(
            "report anchors takes a single --layers value".into(),
        ));
    }
    let layer = *layers.first().expect("non-empty");
    let corpus = read_token_stream(&a.corpus)?;
    let mut captures = Vec::new();
    for seq in corpus.iter().filter(|s| !s.is_empty()).take(a.max_seqs) {
        let seq = &seq[..seq.len().min(model.config.max_seq)];
        let out = model.forward(seq, None, true, None)?;
        let heads: Vec<&AttentionRecord> =
            out.records.iter().filter(|r| r.layer == layer).collect();
        captures.push((seq.to_vec(), layer_mean(&heads)?));
    }
    let report = anchor_frequency_report(&corpus, &captures)?;
    run.write("anchors.csv", report.to_csv())?;
    match report.spearman {
        Some(r) => println!("spearman(frequency, absorbed attention) = {r:.4}"),
        None => println!("spearman undefined (constant ranks)"),
    }
    run.finish()
}

fn report_diff(a: DiffArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut run = Run::start(&a.out, name, args, json!({}))?;
    let left = parse_matrix_csv(&std::fs::read_to_string(&a.a)?)?;
    let right = parse_matrix_csv(&std::fs::read_to_string(&a.b)?)?;
    let paths = export_diff(&left, &right, &run.path("diff"))?;
    run.files.extend(paths);
    run.finish()
}

fn report_summary(a: SummaryArgs, name: &str, args: Vec<String>) -> CliResult<()> {
    let mut run = Run::start(&a.out, name, args, json!({}))?;
    let items: Vec<EvalItem> = read_jsonl(&a.items)?;
    let mut outcomes: Vec<EvalOutcome> = Vec::new();
    for p in &a.outcomes {
        outcomes.extend(evalharness::read_jsonl::<EvalOutcome>(p)?);
    }
    write_eval_reports(&mut run, &outcomes, &items)?;
    run.finish()
}

fn replay(a: ReplayArgs) -> CliResult<()> {
    let recorded = RunManifest::read(&a.manifest)?;
    let mut argv = vec!["attnlab".to_string()];
    argv.extend(recorded.command.split(' ').map(String::from));
    argv.extend(recorded.args.iter().cloned());
    argv.push("--out-dir".into());
    argv.push(a.out_dir.to_string_lossy().into_owned());
    let code = crate::run(&argv);
    if code != 0 {
        return Err(CliError::Data(attnlab::Error::State(format!(
            "replayed command exited with {code}"
        ))));
    }
    let mut bad = recorded.mismatches(&a.out_dir);
    let fresh = RunManifest::read(&a.out_dir.join(MANIFEST_FILE))?;
    if fresh != recorded {
        bad.push(MANIFEST_FILE.to_string());
    }
    if !bad.is_empty() {
        return Err(CliError::Replay(bad));
    }
    println!("replay ok: {} outputs identical", recorded.outputs.len());
    Ok(())
}
