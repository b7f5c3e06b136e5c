//! Key slice localization error, its aggregation, statistical comparison of
//! two result sets, and attention map export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqinsert_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledVolume;
use crate::error::{Error, Result};
use crate::labels::KeySet;
use crate::model::{column_position, predict_insertion, AttentionMap, InsertionModel, InsertionPosition};
use crate::stats::{wilcoxon_signed_rank, WilcoxonResult};
use crate::supervision::{gt_insertion_position, interpolate_scores};
use crate::volume::SliceSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Targets each test volume is inserted into.
    pub partners: usize,
    /// Keys with fewer in-range cases are left out of the millimeter
    /// statistics.
    pub min_cases: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            partners: 5,
            min_cases: 6,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.partners == 0 {
            return Err(Error::Config("eval.partners must be positive".into()));
        }
        Ok(())
    }
}

/// Predicted insertion columns for every sampled query slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub query_index_map: Vec<usize>,
    pub target_index_map: Vec<usize>,
    /// Column of the `N + 2` grid per query row.
    pub columns: Vec<usize>,
    pub target_spacing_mm: f64,
}

/// Anything that places the slices of one volume into another.
pub trait SliceLocalizer: Sync {
    fn place(&self, query: &SliceSequence, target: &SliceSequence) -> Result<Placement>;
}

pub struct InsertionLocalizer<'a> {
    pub model: &'a InsertionModel,
    pub params: &'a ParamStore<f32>,
    pub max_slices: usize,
}

impl SliceLocalizer for InsertionLocalizer<'_> {
    fn place(&self, query: &SliceSequence, target: &SliceSequence) -> Result<Placement> {
        let pred = predict_insertion(query, target, self.model, self.params, self.max_slices)?;
        let stride_spacing = crate::sampling::uniform_stride(target.len(), self.max_slices) as f64 * target.spacing_mm();
        Ok(Placement {
            columns: pred.map.argmax_columns(),
            query_index_map: pred.map.query_index_map,
            target_index_map: pred.map.target_index_map,
            target_spacing_mm: stride_spacing,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    /// Ground truth inside the target: distance in mm (sentinel predictions
    /// count as their boundary column).
    Millimeters(f64),
    /// Ground truth outside the target: whether the matching sentinel was
    /// predicted.
    Boundary { correct: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub volume_pair: String,
    pub key_name: String,
    pub pred: InsertionPosition,
    pub gt: InsertionPosition,
    pub outcome: Outcome,
}

impl LocalizationResult {
    pub fn error_mm(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Millimeters(e) => Some(e),
            Outcome::Boundary { .. } => None,
        }
    }
}

pub fn pair_name(query: &str, target: &str) -> String {
    format!("{query}:{target}")
}

/// Scores the placement of every labeled key slice of `query` in `target`.
/// A key slice skipped by sampling is represented by the nearest sampled
/// query row (the lower one on ties).
pub fn localize_keyslices(
    loc: &dyn SliceLocalizer,
    query: &LabeledVolume,
    target: &LabeledVolume,
    keys: &KeySet,
) -> Result<Vec<LocalizationResult>> {
    let placement = loc.place(&query.volume, &target.volume)?;
    let target_scores = interpolate_scores(&target.labels, target.volume.len(), keys)?.gather(&placement.target_index_map);
    let name = pair_name(&query.volume.volume_id, &target.volume.volume_id);
    let n = placement.target_index_map.len();
    query
        .labels
        .iter()
        .map(|label| {
            let score = keys.score(&label.key_name).ok_or_else(|| Error::UnknownKey(label.key_name.clone()))?;
            let row = nearest_row(&placement.query_index_map, label.slice_index);
            let pred_col = placement.columns[row];
            let gt_col = gt_insertion_position(score, &target_scores);
            let outcome = if gt_col == 0 || gt_col == n + 1 {
                Outcome::Boundary {
                    correct: pred_col == gt_col,
                }
            } else {
                Outcome::Millimeters(pred_col.abs_diff(gt_col) as f64 * placement.target_spacing_mm)
            };
            Ok(LocalizationResult {
                volume_pair: name.clone(),
                key_name: label.key_name.clone(),
                pred: column_position(pred_col, &placement.target_index_map),
                gt: column_position(gt_col, &placement.target_index_map),
                outcome,
            })
        })
        .collect()
}

fn nearest_row(index_map: &[usize], slice: usize) -> usize {
    let mut best = 0;
    for (r, &i) in index_map.iter().enumerate() {
        if i.abs_diff(slice) < index_map[best].abs_diff(slice) {
            best = r;
        }
    }
    best
}

/// Query/target index pairs: each volume is matched with up to `partners`
/// other volumes chosen by a seeded shuffle.
pub fn partner_pairs(n: usize, partners: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for q in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(q as u64);
        let mut others: Vec<usize> = (0..n).filter(|&t| t != q).collect();
        others.shuffle(&mut rng);
        out.extend(others.into_iter().take(partners).map(|t| (q, t)));
    }
    out
}

/// Runs [`localize_keyslices`] over all pairs, spread across threads;
/// results come back in pair order.
pub fn evaluate_pairs(
    loc: &dyn SliceLocalizer,
    volumes: &[LabeledVolume],
    pairs: &[(usize, usize)],
    keys: &KeySet,
) -> Result<Vec<LocalizationResult>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len().max(1));
    let chunk = pairs.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<LocalizationResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for &(q, t) in part {
                        out.extend(localize_keyslices(loc, &volumes[q], &volumes[t], keys)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean over all in-range results; infinite when there are none.
pub fn mean_error_mm(results: &[LocalizationResult]) -> f64 {
    let errs: Vec<f64> = results.iter().filter_map(LocalizationResult::error_mm).collect();
    if errs.is_empty() {
        f64::INFINITY
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyStats {
    pub key_name: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    /// Fewer than `min_cases` in-range cases; not part of the average.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub per_key: Vec<KeyStats>,
    /// Count-weighted mean of the included keys' means.
    pub average_mm: f64,
    pub boundary_cases: usize,
    pub boundary_correct: usize,
}

impl Summary {
    pub fn boundary_accuracy(&self) -> f64 {
        if self.boundary_cases == 0 {
            f64::NAN
        } else {
            self.boundary_correct as f64 / self.boundary_cases as f64
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("key,n,mean_mm,median_mm,std_mm,included\n");
        for k in &self.per_key {
            let _ = writeln!(s, "{},{},{:.3},{:.3},{:.3},{}", k.key_name, k.n, k.mean, k.median, k.std, !k.excluded);
        }
        let _ = writeln!(s, "average,,{:.3},,,", self.average_mm);
        let _ = writeln!(
            s,
            "boundary_accuracy,{},{:.4},,,",
            self.boundary_cases,
            self.boundary_accuracy()
        );
        s
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Per-key statistics in key order, skipping keys with no in-range cases.
pub fn aggregate(results: &[LocalizationResult], keys: &KeySet, min_cases: usize) -> Summary {
    let mut per_key = Vec::new();
    let (mut total, mut count) = (0.0, 0usize);
    for name in keys.names() {
        let mut errs: Vec<f64> = results
            .iter()
            .filter(|r| &r.key_name == name)
            .filter_map(LocalizationResult::error_mm)
            .collect();
        if errs.is_empty() {
            continue;
        }
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        let excluded = n < min_cases;
        if !excluded {
            total += mean * n as f64;
            count += n;
        }
        per_key.push(KeyStats {
            key_name: name.clone(),
            n,
            mean,
            median: median(&errs),
            std: var.sqrt(),
            excluded,
        });
    }
    let boundary: Vec<bool> = results
        .iter()
        .filter_map(|r| match r.outcome {
            Outcome::Boundary { correct } => Some(correct),
            Outcome::Millimeters(_) => None,
        })
        .collect();
    Summary {
        per_key,
        average_mm: if count == 0 { f64::NAN } else { total / count as f64 },
        boundary_cases: boundary.len(),
        boundary_correct: boundary.iter().filter(|&&c| c).count(),
    }
}

const RESULTS_HEADER: &str = "volume_pair,key,pred,gt,error_mm";
/// `error_mm` entry of a missed out-of-range key.
pub const OUT_OF_RANGE: &str = "out_of_range";

pub fn write_results<W: Write>(out: W, results: &[LocalizationResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in results {
        let err = match r.outcome {
            Outcome::Millimeters(e) => e.to_string(),
            Outcome::Boundary { correct: true } => "0".to_string(),
            Outcome::Boundary { correct: false } => OUT_OF_RANGE.to_string(),
        };
        w.write_record([r.volume_pair.clone(), r.key_name.clone(), r.pred.to_string(), r.gt.to_string(), err])?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

pub fn save_results(path: &Path, results: &[LocalizationResult]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_results(f, results)
}

/// Parses a results CSV; rows whose ground truth is a sentinel are boundary
/// cases.
pub fn parse_results<R: Read>(input: R) -> Result<Vec<LocalizationResult>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::Malformed(format!("results header must be `{RESULTS_HEADER}`")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let pred: InsertionPosition = rec[2].parse()?;
        let gt: InsertionPosition = rec[3].parse()?;
        let outcome = match gt {
            InsertionPosition::Slice(_) => {
                let e: f64 = rec[4]
                    .parse()
                    .map_err(|_| Error::Malformed(format!("bad error_mm `{}`", &rec[4])))?;
                if !(e.is_finite() && e >= 0.0) {
                    return Err(Error::Malformed(format!("bad error_mm `{}`", &rec[4])));
                }
                Outcome::Millimeters(e)
            }
            _ => Outcome::Boundary { correct: pred == gt },
        };
        out.push(LocalizationResult {
            volume_pair: rec[0].to_string(),
            key_name: rec[1].to_string(),
            pred,
            gt,
            outcome,
        });
    }
    Ok(out)
}

pub fn load_results(path: &Path) -> Result<Vec<LocalizationResult>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_results(f)
}

/// Paired comparison of the in-range errors that both result sets report for
/// the same (volume pair, key).
pub fn compare_results(a: &[LocalizationResult], b: &[LocalizationResult]) -> Result<WilcoxonResult> {
    let index: HashMap<(&str, &str), f64> = b
        .iter()
        .filter_map(|r| r.error_mm().map(|e| ((r.volume_pair.as_str(), r.key_name.as_str()), e)))
        .collect();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for r in a {
        if let (Some(ea), Some(&eb)) = (r.error_mm(), index.get(&(r.volume_pair.as_str(), r.key_name.as_str()))) {
            xa.push(ea);
            xb.push(eb);
        }
    }
    if xa.is_empty() {
        return Err(Error::Contract("result sets share no in-range cases".into()));
    }
    wilcoxon_signed_rank(&xa, &xb)
}

fn column_label(col: usize, map: &AttentionMap) -> String {
    column_position(col, &map.target_index_map).to_string()
}

/// Writes the `M x (N + 2)` live part of `map` as CSV (first column: query
/// slice index; header: target positions) and as a binary PGM scaled to the
/// largest probability.
pub fn export_attention(map: &AttentionMap, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    let cols = map.n_positions();
    let mut text = String::from("query");
    for c in 0..cols {
        text.push(',');
        text.push_str(&column_label(c, map));
    }
    text.push('\n');
    for r in 0..map.rows() {
        text.push_str(&map.query_index_map[r].to_string());
        for v in map.live_row(r) {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;

    let max = (0..map.rows())
        .flat_map(|r| map.live_row(r).iter().copied())
        .fold(0f32, f32::max);
    let mut pgm = format!("P5\n{} {}\n255\n", cols, map.rows()).into_bytes();
    for r in 0..map.rows() {
        for &v in map.live_row(r) {
            let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            pgm.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(pgm_path, pgm).map_err(|e| Error::io(pgm_path, e))
}

/// An attention CSV read back: query slice indices, column labels and rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTable {
    pub query_indices: Vec<usize>,
    pub columns: Vec<InsertionPosition>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_attention_csv(path: &Path) -> Result<AttentionTable> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(f);
    let header = rdr.headers()?.clone();
    let columns = header.iter().skip(1).map(str::parse).collect::<Result<Vec<_>>>()?;
    let mut table = AttentionTable {
        query_indices: Vec::new(),
        columns,
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |s: &str| Error::Malformed(format!("bad attention value `{s}`"));
        table.query_indices.push(rec[0].parse().map_err(|_| bad(&rec[0]))?);
        let row = rec.iter().skip(1).map(|s| s.parse::<f64>().map_err(|_| bad(s))).collect::<Result<Vec<_>>>()?;
        table.rows.push(row);
    }
    Ok(table)
}
