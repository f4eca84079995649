//! Synthetic multi-hop lookup tasks, early-answer and chain-of-thought
//! runs, the uniquely-solved filter, and summary statistics.
//!
//! Each dataset fixes one cyclic permutation `f` over a small lowercase
//! alphabet. A prompt lists every mapping, asks for a k-hop image and offers
//! four lettered options:
//!
//! ```text
//! <bos>a>c b>f c>a d>h e>b f>g g>d h>e
//! q:d>>?
//! c(A) e(B) a(C) g(D)
//! ```
//!
//! Depth 1 (`recall`) is a single stated fact. Depths 2 and 3 need chained
//! lookups, and the one-hop image is always among the wrong options.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{resolve_anchors, InterventionSpec, Pipeline};
use crate::model::tokenizer::{detokenize, tokenize, BOS, EOS};
use crate::model::{AttentionHook, Model};

pub const LABELS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const DEFAULT_COT_CUE: &str = "Let's think step by step:";
pub const EARLY_CUE: &str = "answer:";
pub const EARLY_MAX_NEW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Recall,
    Chain2,
    Chain3,
}

impl Category {
    pub fn from_depth(depth: usize) -> Result<Self> {
        match depth {
            1 => Ok(Self::Recall),
            2 => Ok(Self::Chain2),
            3 => Ok(Self::Chain3),
            d => Err(Error::Config(format!(
                "chain depth must be 1, 2 or 3, got {d}"
            ))),
        }
    }

    pub fn depth(self) -> usize {
        match self {
            Self::Recall => 1,
            Self::Chain2 => 2,
            Self::Chain3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Recall => "recall",
            Self::Chain2 => "chain2",
            Self::Chain3 => "chain3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub category: Category,
    pub prompt_tokens: Vec<u32>,
    /// Option text for labels A..D.
    pub choices: Vec<String>,
    pub gold: usize,
    pub solvable_by_lookup: bool,
    /// Reference reasoning that follows the CoT cue, ending in the answer.
    pub reference_cot: String,
}

impl EvalItem {
    pub fn early_prompt(&self) -> Vec<u32> {
        let mut t = self.prompt_tokens.clone();
        t.extend(tokenize(EARLY_CUE));
        t
    }

    pub fn cot_prompt(&self, cue: &str) -> Vec<u32> {
        let mut t = self.prompt_tokens.clone();
        t.extend(tokenize(cue));
        t
    }

    /// Full CoT demonstration: prompt, cue, reference reasoning, EOS.
    pub fn cot_sequence(&self, cue: &str) -> Vec<u32> {
        let mut t = self.cot_prompt(cue);
        t.extend(tokenize(&self.reference_cot));
        t.push(EOS);
        t
    }

    /// Early-answer demonstration: prompt, cue, gold label, EOS.
    pub fn early_sequence(&self) -> Vec<u32> {
        let mut t = self.early_prompt();
        t.push(LABELS[self.gold] as u32);
        t.push(EOS);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_items: usize,
    pub n_train: usize,
    pub chain_depths: Vec<usize>,
    pub n_symbols: usize,
    pub cot_cue: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_items: 200,
            n_train: 2000,
            chain_depths: vec![1, 2, 3],
            n_symbols: 8,
            cot_cue: DEFAULT_COT_CUE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<EvalItem>,
    /// Training sequences: early-answer demos for recall items and CoT
    /// demos for every depth.
    pub corpus: Vec<Vec<u32>>,
}

struct TaskWorld {
    symbols: Vec<char>,
    next: BTreeMap<char, char>,
}

impl TaskWorld {
    fn new(rng: &mut Pcg64, n_symbols: usize) -> Self {
        let symbols: Vec<char> = ('a'..='z').take(n_symbols).collect();
        let mut order = symbols.clone();
        order.shuffle(rng);
        let next = (0..n_symbols)
            .map(|i| (order[i], order[(i + 1) % n_symbols]))
            .collect();
        Self { symbols, next }
    }

    fn hop(&self, mut s: char, k: usize) -> char {
        for _ in 0..k {
            s = self.next[&s];
        }
        s
    }

    fn fact_line(&self) -> String {
        let facts: Vec<String> = self.next.iter().map(|(a, b)| format!("{a}>{b}")).collect();
        facts.join(" ")
    }

    fn item(&self, rng: &mut Pcg64, id: String, depth: usize) -> Result<EvalItem> {
        let category = Category::from_depth(depth)?;
        let x = *self.symbols.choose(rng).expect("alphabet is non-empty");
        let gold_sym = self.hop(x, depth);
        let mut distractors = Vec::new();
        if depth != 1 {
            distractors.push(self.hop(x, 1));
        }
        let mut rest: Vec<char> = self
            .symbols
            .iter()
            .copied()
            .filter(|&c| c != gold_sym && !distractors.contains(&c))
            .collect();
        rest.shuffle(rng);
        distractors.extend(rest.into_iter().take(3 - distractors.len()));
        let mut options = distractors;
        options.push(gold_sym);
        options.shuffle(rng);
        let gold = options
            .iter()
            .position(|&c| c == gold_sym)
            .expect("gold was inserted");

        let choice_line: Vec<String> = LABELS
            .iter()
            .zip(&options)
            .map(|(l, c)| format!("{c}({l})"))
            .collect();
        let text = format!(
            "{}\nq:{x}{}?\n{}\n",
            self.fact_line(),
            ">".repeat(depth),
            choice_line.join(" ")
        );
        let mut prompt_tokens = vec![BOS];
        prompt_tokens.extend(tokenize(&text));

        let mut reference_cot = String::new();
        let mut cur = x;
        for _ in 0..depth {
            let nxt = self.hop(cur, 1);
            let _ = write!(reference_cot, " {cur}>{nxt}");
            cur = nxt;
        }
        let _ = write!(
            reference_cot,
            " so the answer is {gold_sym}({})",
            LABELS[gold]
        );

        Ok(EvalItem {
            id,
            category,
            prompt_tokens,
            choices: options.iter().map(char::to_string).collect(),
            gold,
            solvable_by_lookup: depth == 1,
            reference_cot,
        })
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_items == 0 {
        return Err(Error::Config("n_items must be >= 1".into()));
    }
    if !(5..=26).contains(&cfg.n_symbols) {
        return Err(Error::Config(format!(
            "n_symbols must lie in [5, 26], got {}",
            cfg.n_symbols
        )));
    }
    if cfg.chain_depths.is_empty() {
        return Err(Error::Config("chain_depths is empty".into()));
    }
    for &d in &cfg.chain_depths {
        Category::from_depth(d)?;
    }
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let world = TaskWorld::new(&mut rng, cfg.n_symbols);
    let mut items = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let depth = cfg.chain_depths[i % cfg.chain_depths.len()];
        items.push(world.item(&mut rng, format!("item-{i:05}"), depth)?);
    }
    let mut corpus = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        let depth = *cfg
            .chain_depths
            .choose(&mut rng)
            .expect("checked non-empty");
        let item = world.item(&mut rng, format!("train-{i:05}"), depth)?;
        if depth == 1 && rng.random_bool(0.5) {
            corpus.push(item.early_sequence());
        } else {
            corpus.push(item.cot_sequence(&cfg.cot_cue));
        }
    }
    Ok(Dataset { items, corpus })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Early,
    Cot,
    CotIntervened,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Early => "early",
            Self::Cot => "cot",
            Self::CotIntervened => "cot_intervened",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub item_id: String,
    pub mode: Mode,
    /// Option index, or `None` for an abstention.
    pub predicted: Option<usize>,
    pub correct: bool,
    pub generated_tokens: usize,
    pub prompt_len: usize,
    pub output_len: usize,
    pub generated_text: String,
}

/// Index of the last standalone option label (`A`..`D` with a non-word
/// character or text boundary on each side).
pub fn extract_label(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    (0..bytes.len()).rev().find_map(|i| {
        let idx = LABELS.iter().position(|&l| l as u8 == bytes[i])?;
        let before = i == 0 || !is_word(bytes[i - 1]);
        let after = i + 1 == bytes.len() || !is_word(bytes[i + 1]);
        (before && after).then_some(idx)
    })
}

fn build_hook(
    model: &Model,
    prompt: &[u32],
    specs: &[InterventionSpec],
) -> Result<Option<Pipeline>> {
    if specs.is_empty() {
        return Ok(None);
    }
    let resolved = resolve_anchors(model, prompt, prompt.len(), specs)?;
    Ok(Some(Pipeline::new(&resolved, &model.config, prompt.len())?))
}

fn outcome(
    item: &EvalItem,
    mode: Mode,
    prompt_len: usize,
    output: &[u32],
    generated: usize,
    predicted: Option<usize>,
) -> EvalOutcome {
    EvalOutcome {
        item_id: item.id.clone(),
        mode,
        predicted,
        correct: predicted == Some(item.gold),
        generated_tokens: generated,
        prompt_len,
        output_len: output.len(),
        generated_text: detokenize(&output[prompt_len..]).unwrap_or_default(),
    }
}

/// Asks for the label right after the prompt. At most two tokens are
/// generated; the first label token is the prediction.
pub fn run_early_answer(
    model: &Model,
    items: &[EvalItem],
    specs: &[InterventionSpec],
) -> Result<Vec<EvalOutcome>> {
    let mut stop: Vec<u32> = LABELS.iter().map(|&c| c as u32).collect();
    stop.push(EOS);
    items
        .iter()
        .map(|item| {
            let prompt = item.early_prompt();
            let mut hook = build_hook(model, &prompt, specs)?;
            let (out, generated) = model.generate_greedy(
                &prompt,
                EARLY_MAX_NEW,
                &stop,
                hook.as_mut().map(|h| h as &mut dyn AttentionHook),
            )?;
            let predicted = out[prompt.len()..]
                .iter()
                .find_map(|&t| LABELS.iter().position(|&l| l as u32 == t));
            Ok(outcome(
                item,
                Mode::Early,
                prompt.len(),
                &out,
                generated,
                predicted,
            ))
        })
        .collect()
}

/// Appends the reasoning cue and generates up to `budget` tokens (stopping
/// at EOS). The last label in the generated text is the prediction. A
/// non-empty `specs` list runs the intervention pipeline and marks the
/// outcomes `cot_intervened`.
pub fn run_cot(
    model: &Model,
    items: &[EvalItem],
    specs: &[InterventionSpec],
    budget: usize,
    cue: &str,
) -> Result<Vec<EvalOutcome>> {
    if budget < 4 {
        return Err(Error::Config(format!(
            "CoT budget must be >= 4, got {budget}"
        )));
    }
    let mode = if specs.is_empty() {
        Mode::Cot
    } else {
        Mode::CotIntervened
    };
    items
        .iter()
        .map(|item| {
            let prompt = item.cot_prompt(cue);
            let mut hook = build_hook(model, &prompt, specs)?;
            let (out, generated) = model.generate_greedy(
                &prompt,
                budget,
                &[EOS],
                hook.as_mut().map(|h| h as &mut dyn AttentionHook),
            )?;
            let text = detokenize(&out[prompt.len()..])?;
            Ok(outcome(
                item,
                mode,
                prompt.len(),
                &out,
                generated,
                extract_label(&text),
            ))
        })
        .collect()
}

/// One outcome per item for a single mode, keyed by item id.
fn index_outcomes<'a>(
    outcomes: &'a [EvalOutcome],
    items: &[EvalItem],
    mode: Mode,
) -> Result<BTreeMap<&'a str, &'a EvalOutcome>> {
    let ids: BTreeSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let mut map = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.mode == mode) {
        if !ids.contains(o.item_id.as_str()) {
            return Err(Error::Pairing(format!(
                "{} outcome for unknown item {}",
                mode.name(),
                o.item_id
            )));
        }
        if map.insert(o.item_id.as_str(), o).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate {} outcome for item {}",
                mode.name(),
                o.item_id
            )));
        }
    }
    Ok(map)
}

/// Items whose early answer was wrong (including abstentions).
pub fn filter_uniquely_solvable(
    early: &[EvalOutcome],
    items: &[EvalItem],
) -> Result<Vec<EvalItem>> {
    let map = index_outcomes(early, items, Mode::Early)?;
    let mut out = Vec::new();
    for item in items {
        let o = map
            .get(item.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no early outcome for item {}", item.id)))?;
        if !o.correct {
            out.push(item.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    /// Items in the denominator.
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    /// Generated-token statistics over correctly solved items.
    pub mean_tokens: Option<f64>,
    pub median_tokens: Option<f64>,
}

impl ModeStats {
    fn from_outcomes(outcomes: &[&EvalOutcome]) -> Self {
        let solved: Vec<usize> = outcomes
            .iter()
            .filter(|o| o.correct)
            .map(|o| o.generated_tokens)
            .collect();
        let n = outcomes.len();
        Self {
            n,
            correct: solved.len(),
            accuracy: (n > 0).then(|| solved.len() as f64 / n as f64),
            mean_tokens: mean(&solved),
            median_tokens: median(&solved),
        }
    }
}

pub fn mean(values: &[usize]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<usize>() as f64 / values.len() as f64)
}

pub fn median(values: &[usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub n_items: usize,
    /// Early answering over every item of the category.
    pub early: ModeStats,
    /// Items whose early answer was wrong.
    pub filtered: usize,
    /// CoT runs over the filtered subset; accuracy here is the uniquely
    /// solved proportion. Keyed by mode name.
    pub cot: BTreeMap<String, ModeStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: BTreeMap<String, CategoryReport>,
    pub overall: CategoryReport,
}

/// Per-category and overall statistics. Every item needs an early outcome;
/// each CoT mode present in `outcomes` needs an outcome for every filtered
/// item. Categories without items are left out.
pub fn summarize(outcomes: &[EvalOutcome], items: &[EvalItem]) -> Result<EvalReport> {
    let early = index_outcomes(outcomes, items, Mode::Early)?;
    let filtered: BTreeSet<String> = filter_uniquely_solvable(outcomes, items)?
        .into_iter()
        .map(|i| i.id)
        .collect();
    let mut cot_maps = BTreeMap::new();
    for mode in [Mode::Cot, Mode::CotIntervened] {
        if outcomes.iter().any(|o| o.mode == mode) {
            let map = index_outcomes(outcomes, items, mode)?;
            if let Some(missing) = filtered.iter().find(|id| !map.contains_key(id.as_str())) {
                return Err(Error::Pairing(format!(
                    "no {} outcome for filtered item {missing}",
                    mode.name()
                )));
            }
            cot_maps.insert(mode, map);
        }
    }
    let report_for = |subset: &[&EvalItem]| -> CategoryReport {
        let early_o: Vec<&EvalOutcome> = subset.iter().map(|i| early[i.id.as_str()]).collect();
        let kept: Vec<&&EvalItem> = subset.iter().filter(|i| filtered.contains(&i.id)).collect();
        let cot = cot_maps
            .iter()
            .map(|(mode, map)| {
                let os: Vec<&EvalOutcome> = kept.iter().map(|i| map[i.id.as_str()]).collect();
                (mode.name().to_string(), ModeStats::from_outcomes(&os))
            })
            .collect();
        CategoryReport {
            n_items: subset.len(),
            early: ModeStats::from_outcomes(&early_o),
            filtered: kept.len(),
            cot,
        }
    };
    let mut by_cat: BTreeMap<Category, Vec<&EvalItem>> = BTreeMap::new();
    for item in items {
        by_cat.entry(item.category).or_default().push(item);
    }
    let all: Vec<&EvalItem> = items.iter().collect();
    Ok(EvalReport {
        categories: by_cat
            .iter()
            .map(|(c, subset)| (c.name().to_string(), report_for(subset)))
            .collect(),
        overall: report_for(&all),
    })
}

impl EvalReport {
    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    /// `category,mode,accuracy,mean_tokens,median_tokens,n`. Early rows
    /// cover every item of the category; CoT rows cover the filtered subset.
    /// Undefined statistics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,mode,accuracy,mean_tokens,median_tokens,n\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows = self
            .categories
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("overall", &self.overall)));
        for (name, cat) in rows {
            let modes = std::iter::once(("early", &cat.early))
                .chain(cat.cot.iter().map(|(m, s)| (m.as_str(), s)));
            for (mode, s) in modes {
                let _ = writeln!(
                    out,
                    "{name},{mode},{},{},{},{}",
                    cell(s.accuracy),
                    cell(s.mean_tokens),
                    cell(s.median_tokens),
                    s.n
                );
            }
        }
        out
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
