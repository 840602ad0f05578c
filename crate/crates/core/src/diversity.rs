//! Expert diversity: normalized pairwise distances between expert outputs.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// `E × E`, symmetric, zero diagonal, scaled so the largest entry is 1.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over off-diagonal entries.
    pub score: f64,
    /// Mean over all `E²` entries, diagonal included.
    pub score_all_entries: f64,
    /// Largest raw distance, the normalizer of `matrix`.
    pub max_distance: f64,
    pub experts: usize,
    pub samples: usize,
}

/// Sum in ascending order so the result does not depend on input order.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Builds the report from per-expert outputs, each `N × F` with one
/// flattened row per sample.
pub fn diversity_report(outputs: &[Tensor]) -> Result<DiversityReport> {
    let e = outputs.len();
    if e < 2 {
        return Err(Error::Config(format!("diversity needs at least 2 experts, got {e}")));
    }
    let first = &outputs[0];
    if first.shape().len() != 2 || first.rows() == 0 {
        return Err(Error::Config("diversity needs a non-empty N × F output per expert".into()));
    }
    if let Some(bad) = outputs.iter().find(|o| o.shape() != first.shape()) {
        return Err(Error::shape("diversity_report", first.shape(), bad.shape()));
    }
    let mut raw = vec![vec![0.0; e]; e];
    for i in 0..e {
        for j in i + 1..e {
            let ss: f64 = outputs[i]
                .data()
                .iter()
                .zip(outputs[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            raw[i][j] = ss.sqrt();
            raw[j][i] = raw[i][j];
        }
    }
    let max = raw.iter().flatten().copied().fold(0.0, f64::max);
    let matrix = if max > 0.0 {
        raw.into_iter()
            .map(|row| row.into_iter().map(|v| v / max).collect())
            .collect()
    } else {
        log::warn!("all experts produce identical outputs; diversity matrix is zero");
        vec![vec![0.0; e]; e]
    };
    let off: Vec<f64> = (0..e)
        .flat_map(|i| (0..e).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| matrix[i][j])
        .collect();
    let total = sorted_sum(off);
    Ok(DiversityReport {
        score: total / (e * (e - 1)) as f64,
        score_all_entries: total / (e * e) as f64,
        max_distance: max,
        experts: e,
        samples: first.rows(),
        matrix,
    })
}

const SHADES: &[u8] = b" .:-=+*#%@";

/// ASCII rendering, darker characters for larger distances.
pub fn render_heatmap(report: &DiversityReport) -> String {
    let mut out = String::from("    ");
    for j in 0..report.experts {
        out.push_str(&format!("{j:>3}"));
    }
    out.push('\n');
    for (i, row) in report.matrix.iter().enumerate() {
        out.push_str(&format!("{i:>3} "));
        for &v in row {
            let level = ((v * SHADES.len() as f64) as usize).min(SHADES.len() - 1);
            let c = SHADES[level] as char;
            out.push(' ');
            out.push(c);
            out.push(c);
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "d_bar = {:.4} (off-diagonal), {:.4} (all entries), N = {}\n",
        report.score, report.score_all_entries, report.samples
    ));
    out
}

/// Writes the matrix as CSV to `path` and the ASCII rendering next to it
/// with a `.txt` extension. Returns the rendering's path.
pub fn export_heatmap(report: &DiversityReport, path: &Path) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["expert".to_string()];
    header.extend((0..report.experts).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (i, row) in report.matrix.iter().enumerate() {
        let mut rec = vec![format!("e{i}")];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let txt = path.with_extension("txt");
    std::fs::write(&txt, render_heatmap(report))?;
    Ok(txt)
}

/// Reads a matrix written by [`export_heatmap`].
pub fn import_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("bad matrix entry `{c}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Data(format!("{}: matrix is not square", path.display())));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpFormat {
    Csv,
    JsonLines,
}

impl DumpFormat {
    /// JSON lines for `.jsonl`/`.ndjson`, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => DumpFormat::JsonLines,
            _ => DumpFormat::Csv,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpRecord {
    sample: usize,
    expert: usize,
    values: Vec<f64>,
}

/// Writes one record per (sample, expert) with the flattened output vector.
pub fn write_activation_dump(outputs: &[Tensor], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let format = DumpFormat::from_path(path);
    if format == DumpFormat::Csv {
        let width = outputs.first().map_or(0, Tensor::cols);
        let mut header = String::from("sample,expert");
        for k in 0..width {
            header.push_str(&format!(",v{k}"));
        }
        writeln!(w, "{header}")?;
    }
    let samples = outputs.first().map_or(0, Tensor::rows);
    for n in 0..samples {
        for (e, out) in outputs.iter().enumerate() {
            let values = out.row(n).to_vec();
            match format {
                DumpFormat::Csv => {
                    let cells: Vec<String> = values.iter().map(f64::to_string).collect();
                    writeln!(w, "{n},{e},{}", cells.join(","))?;
                }
                DumpFormat::JsonLines => {
                    let rec = DumpRecord {
                        sample: n,
                        expert: e,
                        values,
                    };
                    writeln!(w, "{}", serde_json::to_string(&rec)?)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump back into one `N × F` tensor per expert. Records may appear
/// in any order but every (sample, expert) pair must be present exactly once.
pub fn read_activation_dump(path: &Path) -> Result<Vec<Tensor>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    match DumpFormat::from_path(path) {
        DumpFormat::Csv => {
            let mut r = csv::Reader::from_path(path)?;
            for rec in r.records() {
                let rec = rec?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let num = |s: &str| s.trim().parse::<f64>().map_err(|_| parse_err(line, format!("bad cell `{s}`")));
                let idx = |s: &str| s.trim().parse::<usize>().map_err(|_| parse_err(line, format!("bad index `{s}`")));
                records.push(DumpRecord {
                    sample: idx(rec.get(0).unwrap_or(""))?,
                    expert: idx(rec.get(1).unwrap_or(""))?,
                    values: rec.iter().skip(2).map(num).collect::<Result<_>>()?,
                });
            }
        }
        DumpFormat::JsonLines => {
            for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                records.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?);
            }
        }
    }
    let experts = records.iter().map(|r| r.expert + 1).max().unwrap_or(0);
    let samples = records.iter().map(|r| r.sample + 1).max().unwrap_or(0);
    let width = records.first().map_or(0, |r| r.values.len());
    if records.len() != experts * samples {
        return Err(Error::Data(format!(
            "dump has {} records for {samples} samples × {experts} experts",
            records.len()
        )));
    }
    let mut data = vec![vec![f64::NAN; samples * width]; experts];
    let mut seen = vec![false; samples * experts];
    for r in records {
        if r.values.len() != width || std::mem::replace(&mut seen[r.sample * experts + r.expert], true) {
            return Err(Error::Data(format!(
                "dump record (sample {}, expert {}) is repeated or has the wrong width",
                r.sample, r.expert
            )));
        }
        data[r.expert][r.sample * width..(r.sample + 1) * width].copy_from_slice(&r.values);
    }
    data.into_iter().map(|d| Tensor::matrix(samples, width, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outputs(rows: &[&[f64]]) -> Vec<Tensor> {
        rows.iter().map(|r| Tensor::matrix(1, r.len(), r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn identical_experts_have_zero_diversity() {
        let r = diversity_report(&outputs(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!(r.matrix.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn two_distinct_experts_normalize_to_one() {
        let r = diversity_report(&outputs(&[&[0.0, 0.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(r.matrix, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(r.score, 1.0);
        assert_eq!(r.score_all_entries, 0.5);
    }

    #[test]
    fn fewer_than_two_experts_is_config_error() {
        assert!(diversity_report(&outputs(&[&[1.0]])).unwrap_err().is_config());
    }

    #[test]
    fn heatmap_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = diversity_report(&outputs(&[&[0.0], &[1.0]])).unwrap();
        let path = dir.path().join("d.csv");
        let txt = export_heatmap(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(import_matrix(&path).unwrap(), r.matrix);
        assert!(std::fs::read_to_string(txt).unwrap().contains("@@"));

        let many: Vec<Tensor> = (0..12)
            .map(|e| Tensor::matrix(3, 2, (0..6).map(|k| ((e * 7 + k) as f64).sin()).collect()).unwrap())
            .collect();
        let big = diversity_report(&many).unwrap();
        export_heatmap(&big, &path).unwrap();
        let back = import_matrix(&path).unwrap();
        assert_eq!(back.len(), 12);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(back[i][j], back[j][i]);
            }
        }
        assert_eq!(back, big.matrix);
    }

    #[test]
    fn activation_dump_round_trips_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let outs: Vec<Tensor> = (0..3)
            .map(|e| Tensor::matrix(4, 2, (0..8).map(|k| (e * 10 + k) as f64 / 3.0).collect()).unwrap())
            .collect();
        for name in ["a.csv", "a.jsonl"] {
            let path = dir.path().join(name);
            write_activation_dump(&outs, &path).unwrap();
            assert_eq!(read_activation_dump(&path).unwrap(), outs);
        }
    }

    fn activation_set() -> impl Strategy<Value = Vec<Tensor>> {
        (2usize..6, 1usize..5, 1usize..4).prop_flat_map(|(e, n, f)| {
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n * f), e)
                .prop_map(move |sets| sets.into_iter().map(|d| Tensor::matrix(n, f, d).unwrap()).collect())
        })
    }

    proptest! {
        #[test]
        fn report_invariants(outs in activation_set()) {
            let r = diversity_report(&outs).unwrap();
            for i in 0..r.experts {
                prop_assert_eq!(r.matrix[i][i], 0.0);
                for j in 0..r.experts {
                    prop_assert_eq!(r.matrix[i][j], r.matrix[j][i]);
                    prop_assert!((0.0..=1.0).contains(&r.matrix[i][j]));
                }
            }
            prop_assert!((0.0..=1.0).contains(&r.score));
        }

        #[test]
        fn permutation_invariance(outs in activation_set(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..outs.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<Tensor> = perm.iter().map(|&p| outs[p].clone()).collect();
            let (a, b) = (diversity_report(&outs).unwrap(), diversity_report(&shuffled).unwrap());
            prop_assert_eq!(a.score, b.score);
            for i in 0..perm.len() {
                for j in 0..perm.len() {
                    prop_assert_eq!(b.matrix[i][j], a.matrix[perm[i]][perm[j]]);
                }
            }
        }

        #[test]
        fn power_of_two_scaling_is_exact(outs in activation_set(), exp in -8i32..8) {
            let c = 2f64.powi(exp);
            let scaled: Vec<Tensor> = outs.iter().map(|t| t.map(|v| v * c)).collect();
            let (a, b) = (diversity_report(&outs).unwrap(), diversity_report(&scaled).unwrap());
            prop_assert_eq!(a.max_distance * c, b.max_distance);
            prop_assert_eq!(a.score, b.score);
            prop_assert_eq!(a.score_all_entries, b.score_all_entries);
            prop_assert_eq!(a.matrix, b.matrix);
        }

        #[test]
        fn arbitrary_positive_scaling_within_rounding(outs in activation_set(), c in 0.01f64..100.0) {
            let scaled: Vec<Tensor> = outs.iter().map(|t| t.map(|v| v * c)).collect();
            let (a, b) = (diversity_report(&outs).unwrap(), diversity_report(&scaled).unwrap());
            prop_assert!((a.score - b.score).abs() < 1e-12);
            for (ra, rb) in a.matrix.iter().zip(&b.matrix) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
