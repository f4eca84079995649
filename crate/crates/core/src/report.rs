//! Data-file emitters: attention heatmaps (CSV + 8-bit PGM), signed
//! difference maps, the anchor/frequency table, token-length tables and run
//! manifests.
//!
//! CSV cells use Rust's shortest round-trip `f64` formatting, so parsing a
//! CSV and writing it again reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalharness::EvalReport;
use crate::interventions::AppliedSpec;
use crate::numerics::Tensor;

/// Slack allowed past the declared range before a value is rejected;
/// softmax outputs can land one ulp above 1.
const RANGE_SLACK: f64 = 1e-12;

fn square(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::Dimension(format!(
            "{what} must be a square matrix, got {s:?}"
        ))),
    }
}

fn check_range(t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let n = t.cols();
    match t
        .data()
        .iter()
        .position(|v| !(*v >= lo - RANGE_SLACK && *v <= hi + RANGE_SLACK))
    {
        Some(i) => Err(Error::Range {
            value: t.data()[i],
            location: format!("row {}, column {}", i / n, i % n),
            lo,
            hi,
        }),
        None => Ok(()),
    }
}

/// `round(255·v)` with halves rounded up.
pub fn pixel(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Maps `[-1, 1]` onto `[0, 255]` with 0 at 128.
pub fn signed_pixel(v: f64) -> u8 {
    (127.5 * (v + 1.0) + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let cells: Vec<String> = t.row(r).iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|e| {
                        Error::format("heatmap csv", format!("row {i}: cannot parse {c:?}: {e}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Binary greyscale image, row `i` of the matrix is image row `i`.
pub fn pgm_bytes(t: &Tensor, map: impl Fn(f64) -> u8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", t.cols(), t.rows()).into_bytes();
    out.extend(t.data().iter().map(|&v| map(v)));
    out
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<base>.csv` and `<base>.pgm` for a square matrix with entries
/// in `[0, 1]`. Returns both paths.
pub fn export_heatmap(scores: &Tensor, path_base: &Path) -> Result<[PathBuf; 2]> {
    square(scores, "heatmap")?;
    check_range(scores, 0.0, 1.0)?;
    let csv = with_ext(path_base, "csv");
    let pgm = with_ext(path_base, "pgm");
    std::fs::write(&csv, matrix_csv(scores))?;
    std::fs::write(&pgm, pgm_bytes(scores, pixel))?;
    Ok([csv, pgm])
}

/// Signed heatmap of `a - b`, values in `[-1, 1]`.
pub fn export_diff(a: &Tensor, b: &Tensor, path_base: &Path) -> Result<[PathBuf; 2]> {
    let diff = difference(a, b)?;
    square(&diff, "difference map")?;
    check_range(&diff, -1.0, 1.0)?;
    let csv = with_ext(path_base, "csv");
    let pgm = with_ext(path_base, "pgm");
    std::fs::write(&csv, matrix_csv(&diff))?;
    std::fs::write(&pgm, pgm_bytes(&diff, signed_pixel))?;
    Ok([csv, pgm])
}

pub fn difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cannot diff shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// `None` when fewer than two points or either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAnchorRow {
    pub token: u32,
    pub count: usize,
    /// 1 = most frequent; ties broken by lower token id.
    pub frequency_rank: usize,
    /// Mean column attention the token receives in the captures, or `None`
    /// if it never occurs there.
    pub mean_attention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFrequencyReport {
    pub rows: Vec<TokenAnchorRow>,
    /// Spearman correlation between corpus count and mean absorbed
    /// attention over tokens present in both.
    pub spearman: Option<f64>,
}

impl AnchorFrequencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,count,frequency_rank,mean_attention\n");
        for r in &self.rows {
            let att = r.mean_attention.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.token, r.count, r.frequency_rank, att);
        }
        out
    }
}

/// Relates how often each token occurs in `corpus` to how much attention
/// it absorbs. Each capture is a token sequence with its head-averaged
/// square score matrix; a position's absorbed attention is its column mean
/// over causally valid rows.
pub fn anchor_frequency_report(
    corpus: &[Vec<u32>],
    captures: &[(Vec<u32>, Tensor)],
) -> Result<AnchorFrequencyReport> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::Length(
            "anchor/frequency report needs a non-empty corpus".into(),
        ));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in corpus.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    let mut absorbed: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (tokens, scores) in captures {
        let n = square(scores, "capture")?;
        if n != tokens.len() {
            return Err(Error::Dimension(format!(
                "capture of size {n} paired with {} tokens",
                tokens.len()
            )));
        }
        let means = crate::interventions::column_means(scores)?;
        for (&t, m) in tokens.iter().zip(means) {
            let e = absorbed.entry(t).or_default();
            e.0 += m;
            e.1 += 1;
        }
    }
    let mut by_freq: Vec<(u32, usize)> = counts.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let rows: Vec<TokenAnchorRow> = by_freq
        .iter()
        .enumerate()
        .map(|(i, &(token, count))| TokenAnchorRow {
            token,
            count,
            frequency_rank: i + 1,
            mean_attention: absorbed.get(&token).map(|(s, c)| s / *c as f64),
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.mean_attention.map(|a| (r.count as f64, a)))
        .unzip();
    Ok(AnchorFrequencyReport {
        spearman: spearman(&xs, &ys),
        rows,
    })
}

/// Overall per-mode generated-token statistics over solved items:
/// `mode,mean_tokens,median_tokens,solved,n`.
pub fn token_length_csv(report: &EvalReport) -> String {
    let mut out = String::from("mode,mean_tokens,median_tokens,solved,n\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let o = &report.overall;
    let modes =
        std::iter::once(("early", &o.early)).chain(o.cot.iter().map(|(m, s)| (m.as_str(), s)));
    for (mode, s) in modes {
        let _ = writeln!(
            out,
            "{mode},{},{},{},{}",
            cell(s.mean_tokens),
            cell(s.median_tokens),
            s.correct,
            s.n
        );
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the subcommand, without `--out-dir`.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub weights_sha256: Option<String>,
    pub interventions: Vec<AppliedSpec>,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub outputs: Vec<OutputFile>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    /// Hashes `files` (relative to `out_dir`) into the output list, sorted
    /// by path.
    pub fn record_outputs(&mut self, out_dir: &Path, files: &[PathBuf]) -> Result<()> {
        let mut outputs = Vec::with_capacity(files.len());
        for f in files {
            let rel = f.strip_prefix(out_dir).unwrap_or(f);
            outputs.push(OutputFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&out_dir.join(rel))?,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.dedup_by(|a, b| a.path == b.path);
        self.outputs = outputs;
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let value = serde_json::to_value(self)?;
        std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Output paths whose hash under `out_dir` differs from the recorded one
    /// (missing files included).
    pub fn mismatches(&self, out_dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|o| {
                sha256_file(&out_dir.join(&o.path)).ok().as_deref() != Some(o.sha256.as_str())
            })
            .map(|o| o.path.clone())
            .collect()
    }
}
