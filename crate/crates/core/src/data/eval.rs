use alloc::format;
use alloc::vec::Vec;

use super::synth::{stack_images, PersonImage, StyleProfile};
use crate::error::{shape_err, Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Identity and camera of one query or gallery entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

impl From<&PersonImage> for Meta {
    fn from(p: &PersonImage) -> Self {
        Meta { identity: p.identity, camera: p.camera }
    }
}

/// `d(q, g) = 1 − q·g / (‖q‖‖g‖)`, clamped to `[0, 2]`.
pub fn cosine_distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (qs, gs) = (query.shape(), gallery.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(shape_err!("cosine distance needs n×d matrices of equal d, got {:?} and {:?}", qs, gs));
    }
    let d = qs[1];
    let normalise = |m: &Tensor, what: &str| -> Result<Vec<f64>> {
        let mut out = m.data().to_vec();
        for (i, row) in out.chunks_mut(d.max(1)).enumerate() {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Evaluation(format!("{what} row {i} has zero or non-finite norm")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    };
    let q = normalise(query, "query")?;
    let g = normalise(gallery, "gallery")?;
    let mut out = Vec::with_capacity(qs[0] * gs[0]);
    for qr in q.chunks(d.max(1)).take(qs[0]) {
        for gr in g.chunks(d.max(1)).take(gs[0]) {
            let dot: f64 = qr.iter().zip(gr).map(|(a, b)| a * b).sum();
            out.push((1.0 - dot).clamp(0.0, 2.0));
        }
    }
    Tensor::new(&[qs[0], gs[0]], out)
}

/// Per-query rankings plus CMC and mAP.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Indices of the evaluated queries.
    pub queries: Vec<usize>,
    /// Queries without any valid match after filtering.
    pub excluded: Vec<usize>,
    /// For each evaluated query, gallery indices by increasing distance
    /// with same-identity same-camera entries removed.
    pub rankings: Vec<Vec<usize>>,
    /// `cmc[k − 1]` is the fraction of queries whose first match is within
    /// the top `k`.
    pub cmc: Vec<f64>,
    pub average_precision: Vec<f64>,
    pub map: f64,
}

impl RankingResult {
    /// CMC at rank `k ≥ 1`.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn r1(&self) -> f64 {
        self.rank(1)
    }

    pub fn r5(&self) -> f64 {
        self.rank(5)
    }

    pub fn r10(&self) -> f64 {
        self.rank(10)
    }
}

/// Single-query CMC and mAP. Ties in distance are broken by gallery index.
/// AP is the mean of precision at each relevant hit.
pub fn evaluate_cmc_map(distances: &Tensor, query: &[Meta], gallery: &[Meta]) -> Result<RankingResult> {
    if distances.shape() != [query.len(), gallery.len()] {
        return Err(shape_err!(
            "distance matrix {:?} does not match {} queries × {} gallery",
            distances.shape(),
            query.len(),
            gallery.len()
        ));
    }
    let ng = gallery.len();
    let mut result = RankingResult {
        queries: Vec::new(),
        excluded: Vec::new(),
        rankings: Vec::new(),
        cmc: Vec::new(),
        average_precision: Vec::new(),
        map: 0.0,
    };
    let mut first_hits = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let row = &distances.data()[qi * ng..(qi + 1) * ng];
        if row.iter().any(|d| d.is_nan()) {
            return Err(Error::Evaluation(format!("distance row {qi} contains NaN")));
        }
        let mut order: Vec<usize> =
            (0..ng).filter(|&g| !(gallery[g].identity == q.identity && gallery[g].camera == q.camera)).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant = order.iter().filter(|&&g| gallery[g].identity == q.identity).count();
        if relevant == 0 {
            result.excluded.push(qi);
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in order.iter().enumerate() {
            if gallery[g].identity == q.identity {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        first_hits.push(first.unwrap_or(0));
        result.average_precision.push(precision_sum / relevant as f64);
        result.queries.push(qi);
        result.rankings.push(order);
    }
    let n = result.queries.len();
    if n == 0 {
        return Err(Error::Evaluation("no query has a valid gallery match".into()));
    }
    let depth = result.rankings.iter().map(Vec::len).max().unwrap_or(0);
    let mut counts = alloc::vec![0usize; depth];
    for &f in &first_hits {
        counts[f] += 1;
    }
    let mut acc = 0usize;
    result.cmc = counts
        .iter()
        .map(|c| {
            acc += c;
            acc as f64 / n as f64
        })
        .collect();
    result.map = result.average_precision.iter().sum::<f64>() / n as f64;
    Ok(result)
}

/// Eval-mode features, cosine distances and ranking metrics in one call.
pub fn evaluate_model(model: &mut Model, query: &[PersonImage], gallery: &[PersonImage], batch: usize) -> Result<RankingResult> {
    let qf = model.extract_features(&stack_images(query)?, batch)?;
    let gf = model.extract_features(&stack_images(gallery)?, batch)?;
    let dist = cosine_distance_matrix(&qf, &gf)?;
    let qm: Vec<Meta> = query.iter().map(Meta::from).collect();
    let gm: Vec<Meta> = gallery.iter().map(Meta::from).collect();
    evaluate_cmc_map(&dist, &qm, &gm)
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_change(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let base: f64 = b.data().iter().map(|y| y * y).sum();
    libm::sqrt(diff) / libm::sqrt(base).max(f64::MIN_POSITIVE)
}

/// Relative change of `prefix(x)` when the input is restyled with the pure
/// per-channel affine of `style`.
pub fn style_gap<F>(images: &Tensor, style: &StyleProfile, mut prefix: F) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let clean = prefix(images)?;
    let styled = prefix(&style.apply_affine(images))?;
    if clean.shape() != styled.shape() {
        return Err(shape_err!("prefix output shape changed with style"));
    }
    Ok(relative_change(&styled, &clean))
}
