//! Synthetic data generation, table ingestion, preprocessing, kNN graph
//! construction, and spatial patching.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::metrics::GaussianMixtureSummary;
use crate::objectives::gmm::GmmHyperParams;
use crate::objectives::spatial::{edge_weight, SpatialGraph};

/// Observations plus whatever ground truth the generator knows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub coords: Option<Array2<f64>>,
    pub true_labels: Option<Vec<usize>>,
    pub true_mixture: Option<GaussianMixtureSummary>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if let Some(c) = &self.coords {
            if c.nrows() != n || c.ncols() != 2 {
                return Err(CoreError::DimensionMismatch {
                    field: "coords",
                    expected: n,
                    got: c.nrows(),
                });
            }
        }
        if let Some(l) = &self.true_labels {
            if l.len() != n {
                return Err(CoreError::DimensionMismatch {
                    field: "true_labels",
                    expected: n,
                    got: l.len(),
                });
            }
        }
        Ok(())
    }
}

/// Feature preprocessing pipeline configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PreprocessSpec {
    /// Keep this many top-variance features (0 keeps all).
    pub top_features: usize,
    /// Rescale each row so its total matches the median row total.
    pub normalize_depth: bool,
    pub log1p: bool,
    /// Standardized columns are clipped to +-scale_clip (0 disables clipping).
    pub scale_clip: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            top_features: 0,
            normalize_depth: false,
            log1p: false,
            scale_clip: 3.0,
        }
    }
}

/// Seeded k-means with k-means++ initialization. An emptied cluster is
/// re-seeded from the point farthest from its assigned centroid. Returns
/// `(labels, centroids)`.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<(Vec<usize>, Array2<f64>)> {
    let (n, d) = (x.nrows(), x.ncols());
    if k == 0 || n < k {
        return Err(CoreError::InvalidConfig(format!("kmeans needs n >= k >= 1, got n={n}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist_sq = |i: usize, c: ndarray::ArrayView1<f64>| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let diff = x[[i, j]] - c[j];
            acc += diff * diff;
        }
        acc
    };

    // k-means++ seeding
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut min_dist: Vec<f64> = (0..n).map(|i| dist_sq(i, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            min_dist[i] = min_dist[i].min(dist_sq(i, centroids.row(c)));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..max_iters {
        // assignment
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = dist_sq(i, centroids.row(0));
            for c in 1..k {
                let dd = dist_sq(i, centroids.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // update
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[[labels[i], j]] += x[[i, j]];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist_sq(a, centroids.row(labels[a]))
                            .partial_cmp(&dist_sq(b, centroids.row(labels[b])))
                            .unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&x.row(far));
                labels[far] = c;
                changed = true;
            } else {
                for j in 0..d {
                    centroids[[c, j]] = sums[[c, j]] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok((labels, centroids))
}

/// Draws cluster means from the prior, assigns labels uniformly, and samples
/// observations around the assigned mean with likelihood noise.
pub fn sample_gmm(n: usize, hyper: &GmmHyperParams, seed: u64) -> Result<Dataset> {
    hyper.validate()?;
    let (k, d) = (hyper.k, hyper.dim());
    if n < k {
        return Err(CoreError::InvalidConfig(format!("need n >= K, got n={n}, K={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((k, d));
    for c in 0..k {
        for j in 0..d {
            let normal = Normal::new(hyper.xi[j], hyper.sigma1_sq[j].sqrt()).unwrap();
            centers[[c, j]] = normal.sample(&mut rng);
        }
    }
    let mut labels = vec![0usize; n];
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let z = rng.gen_range(0..k);
        labels[i] = z;
        for j in 0..d {
            let normal = Normal::new(centers[[z, j]], hyper.sigma0_sq[j].sqrt()).unwrap();
            x[[i, j]] = normal.sample(&mut rng);
        }
    }
    let variances = Array2::from_shape_fn((k, d), |(_, j)| hyper.sigma0_sq[j]);
    Ok(Dataset {
        x,
        coords: None,
        true_labels: Some(labels),
        true_mixture: Some(GaussianMixtureSummary::equal_weights(centers, variances)?),
    })
}

/// Fixed batches for one epoch in which each batch draws a fraction `bias` of
/// its members from one designated cluster (round-robin over clusters) and the
/// rest from the remaining pool. Batches partition the index set. Returns the
/// batches and the number of batches whose designated cluster ran short.
pub fn biased_batches(
    labels: &[usize],
    batch_size: usize,
    bias: f64,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let n = labels.len();
    if batch_size == 0 || batch_size > n {
        return Err(CoreError::InvalidConfig(format!(
            "batch_size must be in [1, {n}], got {batch_size}"
        )));
    }
    if !(0.0..=1.0).contains(&bias) {
        return Err(CoreError::InvalidConfig("bias must be in [0, 1]".into()));
    }
    let k = labels.iter().max().map_or(1, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_cluster: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_cluster[l].push(i);
    }
    for pool in &mut by_cluster {
        pool.shuffle(&mut rng);
    }
    let mut rest: Vec<usize> = Vec::new();
    let mut batches = Vec::new();
    let mut underfilled = 0;
    let num_batches = (n + batch_size - 1) / batch_size;
    let mut used = vec![false; n];
    for b in 0..num_batches {
        let cluster = b % k;
        let want_biased = ((batch_size as f64) * bias).floor() as usize;
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < want_biased {
            match by_cluster[cluster].pop() {
                Some(i) if !used[i] => {
                    used[i] = true;
                    batch.push(i);
                }
                Some(_) => {}
                None => break,
            }
        }
        if batch.len() < want_biased {
            underfilled += 1;
        }
        // fill from the global remainder, lazily rebuilt
        while batch.len() < batch_size {
            if rest.is_empty() {
                rest = (0..n).filter(|&i| !used[i]).collect();
                if rest.is_empty() {
                    break;
                }
                rest.shuffle(&mut rng);
            }
            if let Some(i) = rest.pop() {
                if !used[i] {
                    used[i] = true;
                    batch.push(i);
                }
            }
        }
        if !batch.is_empty() {
            batch.sort_unstable();
            batches.push(batch);
        }
    }
    Ok((batches, underfilled))
}

/// Mutual-kNN graph over 2-D coordinates with edge weights from `edge_weight`.
/// Without flow vectors, `g_i` defaults to the unit vector toward `i`'s nearest
/// neighbor. Distance ties break by index order.
pub fn build_knn_graph(
    coords: &Array2<f64>,
    k: usize,
    flows: Option<&Array2<f64>>,
    features: &Array2<f64>,
    tau: f64,
    patches: Option<Vec<usize>>,
) -> Result<SpatialGraph> {
    let n = coords.nrows();
    if coords.ncols() != 2 {
        return Err(CoreError::DimensionMismatch {
            field: "coords columns",
            expected: 2,
            got: coords.ncols(),
        });
    }
    if features.nrows() != n {
        return Err(CoreError::DimensionMismatch {
            field: "feature rows",
            expected: n,
            got: features.nrows(),
        });
    }
    if k == 0 || n < 2 {
        return Err(CoreError::InvalidConfig("kNN graph needs k >= 1 and n >= 2".into()));
    }
    let dist_sq = |i: usize, j: usize| {
        let dx = coords[[i, 0]] - coords[[j, 0]];
        let dy = coords[[i, 1]] - coords[[j, 1]];
        dx * dx + dy * dy
    };
    // k nearest for each node, ties by index
    let mut knn: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            dist_sq(i, a)
                .partial_cmp(&dist_sq(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        others.truncate(k);
        knn.push(others);
    }
    let mut warnings = 0usize;
    let mut edges = Vec::new();
    for i in 0..n {
        for &j in &knn[i] {
            if j > i && knn[j].contains(&i) {
                let g_i: Array1<f64> = match flows {
                    Some(g) => g.row(i).to_owned(),
                    None => {
                        let nn = knn[i][0];
                        let mut v = ndarray::array![
                            coords[[nn, 0]] - coords[[i, 0]],
                            coords[[nn, 1]] - coords[[i, 1]]
                        ];
                        let norm = v.dot(&v).sqrt();
                        if norm > 0.0 {
                            v /= norm;
                        }
                        v
                    }
                };
                let (r, warned) = edge_weight(
                    g_i.view(),
                    coords.row(i),
                    coords.row(j),
                    features.row(i),
                    features.row(j),
                    tau,
                );
                if warned {
                    warnings += 1;
                }
                edges.push((i, j, r));
            }
        }
    }
    let mut graph = SpatialGraph::from_edges(n, &edges, patches)?;
    graph.zero_norm_warnings = warnings;
    Ok(graph)
}

/// Axis-aligned grid tiling of the coordinate bounding box into approximately
/// `target_patches` cells; empty cells are dropped and ids compacted.
pub fn partition_patches(coords: &Array2<f64>, target_patches: usize) -> Result<Vec<usize>> {
    let n = coords.nrows();
    if target_patches == 0 {
        return Err(CoreError::InvalidConfig("target_patches must be >= 1".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        min_x = min_x.min(coords[[i, 0]]);
        max_x = max_x.max(coords[[i, 0]]);
        min_y = min_y.min(coords[[i, 1]]);
        max_y = max_y.max(coords[[i, 1]]);
    }
    let rows = (target_patches as f64).sqrt().round().max(1.0) as usize;
    let cols = (target_patches + rows - 1) / rows;
    let span_x = (max_x - min_x).max(f64::MIN_POSITIVE);
    let span_y = (max_y - min_y).max(f64::MIN_POSITIVE);
    let mut cell_ids = vec![0usize; n];
    for i in 0..n {
        let cx = (((coords[[i, 0]] - min_x) / span_x) * cols as f64).floor() as usize;
        let cy = (((coords[[i, 1]] - min_y) / span_y) * rows as f64).floor() as usize;
        cell_ids[i] = cy.min(rows - 1) * cols + cx.min(cols - 1);
    }
    // compact non-empty cells to consecutive patch ids
    let mut remap = std::collections::BTreeMap::new();
    for &c in &cell_ids {
        let next = remap.len();
        remap.entry(c).or_insert(next);
    }
    Ok(cell_ids.iter().map(|c| remap[c]).collect())
}

/// Synthetic spatial dataset: an `n_side x n_side` grid of locations in the
/// unit square, K contiguous regions (Voronoi of seeded centers), and
/// region-specific feature means with unit noise separated by ~20 sigma.
pub fn synth_spatial(n_side: usize, k: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n_side == 0 || k == 0 || d == 0 {
        return Err(CoreError::InvalidConfig("n_side, K, d must be >= 1".into()));
    }
    let n = n_side * n_side;
    if n < k {
        return Err(CoreError::InvalidConfig("grid too small for K regions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Array2::zeros((n, 2));
    for r in 0..n_side {
        for c in 0..n_side {
            let i = r * n_side + c;
            coords[[i, 0]] = c as f64 / (n_side - 1).max(1) as f64;
            coords[[i, 1]] = r as f64 / (n_side - 1).max(1) as f64;
        }
    }
    let centers: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
        .collect();
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            let dd = (coords[[i, 0]] - cx).powi(2) + (coords[[i, 1]] - cy).powi(2);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        labels[i] = best;
    }
    // region means 20 noise-sigmas apart: distinct magnitudes on rotating axes
    let mut means = Array2::zeros((k, d));
    for r in 0..k {
        means[[r, r % d]] = 20.0 * (1.0 + (r / d) as f64);
    }
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            x[[i, j]] = means[[labels[i], j]] + noise.sample(&mut rng);
        }
    }
    let variances = Array2::ones((k, d));
    Ok(Dataset {
        x,
        coords: Some(coords),
        true_labels: Some(labels),
        true_mixture: Some(GaussianMixtureSummary::equal_weights(means, variances)?),
    })
}

fn detect_delimiter(header: &str) -> char {
    if header.matches('\t').count() > header.matches(',').count() {
        '\t'
    } else {
        ','
    }
}

/// Loads a delimiter-separated table (comma or tab, autodetected) with a
/// one-line header: feature columns `x0..x{d-1}`, optional `cx,cy`
/// coordinates, optional `label`.
pub fn load_table(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Parse { line: 1, msg: "empty file".into() })??;
    let delim = detect_delimiter(&header);
    let cols: Vec<String> = header.split(delim).map(|s| s.trim().to_string()).collect();
    let mut feature_cols = Vec::new();
    let mut cx_col = None;
    let mut cy_col = None;
    let mut label_col = None;
    for (idx, name) in cols.iter().enumerate() {
        match name.as_str() {
            "cx" => cx_col = Some(idx),
            "cy" => cy_col = Some(idx),
            "label" => label_col = Some(idx),
            other if other.starts_with('x') && other[1..].chars().all(|c| c.is_ascii_digit()) => {
                feature_cols.push((other[1..].parse::<usize>().unwrap(), idx));
            }
            other => {
                return Err(CoreError::Parse {
                    line: 1,
                    msg: format!("unknown column '{other}'"),
                })
            }
        }
    }
    feature_cols.sort_unstable();
    if feature_cols.is_empty() {
        return Err(CoreError::Parse { line: 1, msg: "no feature columns x0..".into() });
    }
    let d = feature_cols.len();
    let has_coords = cx_col.is_some() && cy_col.is_some();
    if cx_col.is_some() != cy_col.is_some() {
        return Err(CoreError::Parse { line: 1, msg: "cx and cy must appear together".into() });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(CoreError::Parse {
                line: lineno,
                msg: format!("expected {} cells, got {}", cols.len(), cells.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            cells[idx].parse::<f64>().map_err(|_| CoreError::Parse {
                line: lineno,
                msg: format!("non-numeric cell '{}'", cells[idx]),
            })
        };
        let mut row = Vec::with_capacity(d);
        for &(_, idx) in &feature_cols {
            row.push(num(idx)?);
        }
        rows.push(row);
        if has_coords {
            coords.push((num(cx_col.unwrap())?, num(cy_col.unwrap())?));
        }
        if let Some(idx) = label_col {
            labels.push(cells[idx].parse::<usize>().map_err(|_| CoreError::Parse {
                line: lineno,
                msg: format!("non-integer label '{}'", cells[idx]),
            })?);
        }
    }
    let n = rows.len();
    let mut x = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let coords = if has_coords {
        let mut c = Array2::zeros((n, 2));
        for (i, &(a, b)) in coords.iter().enumerate() {
            c[[i, 0]] = a;
            c[[i, 1]] = b;
        }
        Some(c)
    } else {
        None
    };
    Ok(Dataset {
        x,
        coords,
        true_labels: label_col.map(|_| labels),
        true_mixture: None,
    })
}

/// Writes a dataset in the same format `load_table` reads (comma-separated).
pub fn save_table(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = dataset.d();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    if dataset.coords.is_some() {
        header.push("cx".into());
        header.push("cy".into());
    }
    if dataset.true_labels.is_some() {
        header.push("label".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..dataset.n() {
        let mut cells: Vec<String> = (0..d).map(|j| format!("{}", dataset.x[[i, j]])).collect();
        if let Some(c) = &dataset.coords {
            cells.push(format!("{}", c[[i, 0]]));
            cells.push(format!("{}", c[[i, 1]]));
        }
        if let Some(l) = &dataset.true_labels {
            cells.push(format!("{}", l[i]));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Variance-ranked feature selection, depth normalization to the median row
/// total, log1p, and per-column standardization clipped at +-scale_clip.
pub fn preprocess(dataset: &Dataset, spec: &PreprocessSpec) -> Result<Dataset> {
    dataset.validate()?;
    let n = dataset.n();
    if n == 0 {
        return Err(CoreError::InvalidConfig("empty dataset".into()));
    }
    let mut x = dataset.x.clone();

    if spec.top_features > 0 {
        if spec.top_features > x.ncols() {
            return Err(CoreError::InvalidConfig(format!(
                "top_features {} exceeds d={}",
                spec.top_features,
                x.ncols()
            )));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let mut variances: Vec<(f64, usize)> = (0..x.ncols())
            .map(|j| {
                let v = x.column(j).iter().map(|&e| (e - mean[j]).powi(2)).sum::<f64>() / n as f64;
                (v, j)
            })
            .collect();
        variances.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = variances[..spec.top_features].iter().map(|&(_, j)| j).collect();
        keep.sort_unstable();
        let mut reduced = Array2::zeros((n, keep.len()));
        for (new_j, &j) in keep.iter().enumerate() {
            reduced.column_mut(new_j).assign(&x.column(j));
        }
        x = reduced;
    }

    if spec.normalize_depth {
        let mut totals: Vec<f64> = x.rows().into_iter().map(|r| r.sum()).collect();
        let mut sorted = totals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        for (i, total) in totals.iter_mut().enumerate() {
            if total.abs() > 0.0 {
                let scale = median / *total;
                x.row_mut(i).mapv_inplace(|e| e * scale);
            }
        }
    }

    if spec.log1p {
        if x.iter().any(|&e| e <= -1.0) {
            return Err(CoreError::InvalidConfig("log1p requires entries > -1".into()));
        }
        x.mapv_inplace(f64::ln_1p);
    }

    // per-column standardization + clip
    let mean = x.mean_axis(Axis(0)).unwrap();
    for j in 0..x.ncols() {
        let var = x.column(j).iter().map(|&e| (e - mean[j]).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-12);
        for i in 0..n {
            let mut v = (x[[i, j]] - mean[j]) / sd;
            if spec.scale_clip > 0.0 {
                v = v.clamp(-spec.scale_clip, spec.scale_clip);
            }
            x[[i, j]] = v;
        }
    }

    Ok(Dataset {
        x,
        coords: dataset.coords.clone(),
        true_labels: dataset.true_labels.clone(),
        true_mixture: None,
    })
}
