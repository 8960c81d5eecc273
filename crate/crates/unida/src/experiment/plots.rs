//! Plot emission from a finished run directory: decision-threshold curves,
//! training-loss curves, and a 2-D embedding scatter (PCA projection of
//! the exported features; nonlinear reducers can be applied downstream).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use super::chart::{Chart, Series, PALETTE};
use super::manifest::RunManifest;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("required artifact {0:?} is missing from the run")]
    MissingArtifact(String),
    #[error("artifact {0}: {1}")]
    BadArtifact(String, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
}

/// Emit every plot the run's artifacts support. The threshold-sweep and
/// loss plots require their data; a missing embedding export only skips
/// the scatter with a notice.
pub fn emit_all(run_dir: &Path, manifest: &RunManifest) -> Result<Vec<PathBuf>, PlotError> {
    let mut written = Vec::new();
    if manifest.artifact_path("sweep").is_some() {
        written.push(sweep_plot(run_dir, manifest)?);
    }
    written.push(loss_plot(run_dir, manifest)?);
    if manifest.artifact_path("embeddings").is_some() {
        written.push(embedding_plot(run_dir, manifest)?);
    } else {
        eprintln!("notice: no embedding export in manifest; skipping embedding plot");
    }
    Ok(written)
}

fn artifact_file(run_dir: &Path, manifest: &RunManifest, name: &str) -> Result<PathBuf, PlotError> {
    manifest
        .artifact_path(name)
        .map(|p| run_dir.join(p))
        .ok_or_else(|| PlotError::MissingArtifact(name.to_string()))
}

fn read_csv_columns(
    path: &Path,
    want: &[&str],
) -> Result<Vec<Vec<f64>>, PlotError> {
    let label = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?
        .clone();
    let idx: Vec<usize> = want
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h == *w)
                .ok_or_else(|| PlotError::BadArtifact(label.clone(), format!("missing column {w}")))
        })
        .collect::<Result<_, _>>()?;
    let mut cols = vec![Vec::new(); want.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?;
        for (ci, &fi) in idx.iter().enumerate() {
            let v: f64 = record
                .get(fi)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PlotError::BadArtifact(label.clone(), "bad float".into()))?;
            cols[ci].push(v);
        }
    }
    Ok(cols)
}

/// Decision-threshold sweep: overall accuracy and unknown-class accuracy
/// against w0.
pub fn sweep_plot(run_dir: &Path, manifest: &RunManifest) -> Result<PathBuf, PlotError> {
    let src = artifact_file(run_dir, manifest, "sweep")?;
    let cols = read_csv_columns(&src, &["w0", "avg_all", "unknown_accuracy"])?;
    let series = vec![
        Series {
            points: cols[0].iter().copied().zip(cols[1].iter().copied()).collect(),
            color: PALETTE[1],
            markers: true,
        },
        Series {
            points: cols[0].iter().copied().zip(cols[2].iter().copied()).collect(),
            color: PALETTE[0],
            markers: true,
        },
    ];
    let mut chart = Chart::new((0.0, 2.0), (0.0, 1.0));
    for s in &series {
        chart.line(s);
    }
    let out = run_dir.join("threshold_sweep.png");
    chart.save(&out).map_err(|e| PlotError::Image(e.to_string()))?;
    Ok(out)
}

/// Training losses: adaptation losses always; generation losses when the
/// run had a generation stage.
pub fn loss_plot(run_dir: &Path, manifest: &RunManifest) -> Result<PathBuf, PlotError> {
    let ma = artifact_file(run_dir, manifest, "ma_log")?;
    let cols = read_csv_columns(
        &ma,
        &["step", "adversarial_loss", "source_ce_loss", "similarity_loss"],
    )?;
    let mut series = Vec::new();
    for (i, name) in [(1usize, "adv"), (2, "ce"), (3, "simi")] {
        let _ = name;
        series.push(Series {
            points: cols[0].iter().copied().zip(cols[i].iter().copied()).collect(),
            color: PALETTE[i - 1],
            markers: false,
        });
    }
    if let Some(p) = manifest.artifact_path("sdg_log") {
        let sdg = run_dir.join(p);
        if sdg.exists() {
            let c = read_csv_columns(&sdg, &["step", "classifier_loss", "style_loss"])?;
            for (i, color) in [(1usize, PALETTE[3]), (2, PALETTE[4])] {
                series.push(Series {
                    points: c[0].iter().copied().zip(c[i].iter().copied()).collect(),
                    color,
                    markers: false,
                });
            }
        }
    }
    let mut chart = Chart::fit(&series);
    for s in &series {
        chart.line(s);
    }
    let out = run_dir.join("training_losses.png");
    chart.save(&out).map_err(|e| PlotError::Image(e.to_string()))?;
    Ok(out)
}

/// PCA the exported embeddings to 2-D and scatter them, colored by
/// (domain, category).
pub fn embedding_plot(run_dir: &Path, manifest: &RunManifest) -> Result<PathBuf, PlotError> {
    let src = artifact_file(run_dir, manifest, "embeddings")?;
    let label = src.display().to_string();
    let mut rdr =
        csv::Reader::from_path(&src).map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?
        .clone();
    let d = headers.iter().filter(|h| h.starts_with('f')).count();
    let mut feats: Vec<f64> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| PlotError::BadArtifact(label.clone(), e.to_string()))?;
        let domain = record.get(1).unwrap_or("").to_string();
        let category = record.get(2).unwrap_or("").to_string();
        tags.push(format!("{domain}/{category}"));
        for i in 0..d {
            let v: f64 = record
                .get(3 + i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PlotError::BadArtifact(label.clone(), "bad float".into()))?;
            feats.push(v);
        }
    }
    let n = tags.len();
    if n == 0 {
        return Err(PlotError::BadArtifact(label, "no rows".into()));
    }
    let projected = pca_2d(&feats, n, d);

    // deterministic palette assignment by first appearance
    let mut color_of: BTreeMap<String, [u8; 3]> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for t in &tags {
        if !color_of.contains_key(t) {
            color_of.insert(t.clone(), PALETTE[order.len() % PALETTE.len()]);
            order.push(t.clone());
        }
    }
    let xs: Vec<f64> = projected.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = projected.iter().map(|p| p.1).collect();
    let range = |v: &[f64]| {
        (
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let mut chart = Chart::new(range(&xs), range(&ys));
    for (i, &(x, y)) in projected.iter().enumerate() {
        chart.dot(x, y, color_of[&tags[i]]);
    }
    let out = run_dir.join("embeddings.png");
    chart.save(&out).map_err(|e| PlotError::Image(e.to_string()))?;
    Ok(out)
}

/// Project row-major (n, d) data onto its top two principal components.
pub fn pca_2d(data: &[f64], n: usize, d: usize) -> Vec<(f64, f64)> {
    assert_eq!(data.len(), n * d);
    let mut means = vec![0.0f64; d];
    for row in 0..n {
        for col in 0..d {
            means[col] += data[row * d + col];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in 0..n {
        for a in 0..d {
            let va = data[row * d + a] - means[a];
            for b in a..d {
                let vb = data[row * d + b] - means[b];
                cov[(a, b)] += va * vb;
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    // top-2 eigenvectors by eigenvalue
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite"));
    let (i0, i1) = (idx[0], idx[idx.len().min(2) - 1]);
    let v0 = eig.eigenvectors.column(i0);
    let v1 = eig.eigenvectors.column(i1);
    (0..n)
        .map(|row| {
            let mut x = 0.0;
            let mut y = 0.0;
            for col in 0..d {
                let c = data[row * d + col] - means[col];
                x += c * v0[col];
                y += c * v1[col];
            }
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_finds_dominant_axis() {
        // points along (1, 1, 0) with small noise in other directions
        let n = 50;
        let d = 3;
        let mut data = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64 * 10.0 - 5.0;
            data.extend_from_slice(&[t + 0.01 * (i as f64).sin(), t, 0.02 * (i as f64).cos()]);
        }
        let proj = pca_2d(&data, n, d);
        // first component variance should dominate the second
        let var = |sel: fn(&(f64, f64)) -> f64| {
            let m = proj.iter().map(sel).sum::<f64>() / n as f64;
            proj.iter().map(|p| (sel(p) - m).powi(2)).sum::<f64>() / n as f64
        };
        assert!(var(|p| p.0) > 100.0 * var(|p| p.1));
    }
}
