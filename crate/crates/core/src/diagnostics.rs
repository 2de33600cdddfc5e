//! Dataset-level complexity and diversity statistics.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rpe::RpeValue;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("image could not be decoded: {0}")]
    Image(#[from] image::ImageError),
    #[error("need at least two nonzero vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vectors have different dimensions")]
    DimensionMismatch,
}

/// Shannon entropy (nats) of the pixel histogram after quantizing each RGB
/// channel to 8 levels.
pub fn color_entropy(image_bytes: &[u8]) -> Result<f64, DiagnosticsError> {
    let img = image::load_from_memory(image_bytes)?.to_rgb8();
    let mut bins = [0u64; 512];
    for p in img.pixels() {
        let [r, g, b] = p.0;
        bins[((r >> 5) as usize) << 6 | ((g >> 5) as usize) << 3 | (b >> 5) as usize] += 1;
    }
    let total = (img.width() as u64 * img.height() as u64) as f64;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(bins
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Mean of `1 − cos` over all pairs of `vectors`. Zero vectors are skipped.
pub fn embedding_spread(vectors: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(DiagnosticsError::DimensionMismatch);
    }
    let unit: Vec<Vec<f64>> = vectors
        .iter()
        .filter_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
        })
        .collect();
    if unit.len() < 2 {
        return Err(DiagnosticsError::TooFewVectors(unit.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0u64;
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            total += 1.0 - cos.clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok((total / pairs as f64).max(0.0))
}

/// Indices of a seeded sample of at most `k` out of `n`, ascending.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Default)]
pub struct CorpusItem {
    pub id: String,
    pub image: Option<Vec<u8>>,
    pub embedding: Option<Vec<f64>>,
    pub rpe: Option<RpeValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub corpus_id: String,
    pub record_count: usize,
    pub sample_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpe_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpe_median: Option<f64>,
    /// Sampled records whose score is the zero-valid sentinel; excluded from
    /// the mean and median.
    pub rpe_max_difficulty: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_entropy_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            sample_size: 1000,
            seed: 0,
        }
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

/// Aggregates every metric over one seeded sample of `items`.
pub fn build_report(corpus_id: &str, items: &[CorpusItem], cfg: &ReportConfig) -> CorpusReport {
    let picked: Vec<&CorpusItem> = sample_indices(items.len(), cfg.sample_size, cfg.seed)
        .into_iter()
        .map(|i| &items[i])
        .collect();
    let mut warnings = Vec::new();
    if items.is_empty() {
        warnings.push("corpus is empty".to_string());
    }

    let mut rpes: Vec<f64> = picked
        .iter()
        .filter_map(|it| it.rpe.and_then(|r| r.as_finite()))
        .collect();
    rpes.sort_by(f64::total_cmp);
    let sentinels = picked
        .iter()
        .filter(|it| it.rpe.is_some_and(|r| r.is_sentinel()))
        .count();

    let images: Vec<&[u8]> = picked.iter().filter_map(|it| it.image.as_deref()).collect();
    let entropies = parallel_map(&images, |b| color_entropy(b));
    let mut color = Vec::new();
    for (e, it) in entropies
        .into_iter()
        .zip(picked.iter().filter(|it| it.image.is_some()))
    {
        match e {
            Ok(v) => color.push(v),
            Err(err) => warnings.push(format!("{}: {err}", it.id)),
        }
    }

    let vectors: Vec<Vec<f64>> = picked
        .iter()
        .filter_map(|it| it.embedding.clone())
        .collect();
    let spread = if vectors.is_empty() {
        None
    } else {
        match embedding_spread(&vectors) {
            Ok(s) => Some(s),
            Err(e) => {
                warnings.push(format!("embedding spread: {e}"));
                None
            }
        }
    };

    CorpusReport {
        corpus_id: corpus_id.to_string(),
        record_count: items.len(),
        sample_size: picked.len(),
        rpe_mean: (!rpes.is_empty()).then(|| rpes.iter().sum::<f64>() / rpes.len() as f64),
        rpe_median: (!rpes.is_empty()).then(|| median(&rpes)),
        rpe_max_difficulty: sentinels,
        color_entropy_mean: (!color.is_empty())
            .then(|| color.iter().sum::<f64>() / color.len() as f64),
        embedding_spread: spread,
        warnings,
    }
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(8);
    if items.len() < 2 * threads {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    })
}

/// `id,dim,v0..v{d-1}` rows for items carrying an embedding. Rows are padded
/// to the widest vector.
pub fn embeddings_csv(items: &[CorpusItem]) -> String {
    let width = items
        .iter()
        .filter_map(|it| it.embedding.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut out = String::from("id,dim");
    for i in 0..width {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for it in items {
        let Some(v) = &it.embedding else { continue };
        let _ = write!(out, "{},{}", csv_field(&it.id), v.len());
        for x in v {
            let _ = write!(out, ",{x}");
        }
        for _ in v.len()..width {
            out.push(',');
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Side-by-side comparison as (aligned text, CSV).
pub fn comparison_table(reports: &[CorpusReport]) -> (String, String) {
    let header = [
        "corpus",
        "records",
        "sample",
        "rpe_mean",
        "rpe_median",
        "color_entropy",
        "spread",
    ];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.corpus_id.clone(),
                r.record_count.to_string(),
                r.sample_size.to_string(),
                cell(r.rpe_mean),
                cell(r.rpe_median),
                cell(r.color_entropy_mean),
                cell(r.embedding_spread),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut text = String::new();
    let line = |cells: Vec<&str>, text: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        text.push_str(padded.join("  ").trim_end());
        text.push('\n');
    };
    line(header.to_vec(), &mut text);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut text);
    }
    let mut csv = header.join(",");
    csv.push('\n');
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    (text, csv)
}
