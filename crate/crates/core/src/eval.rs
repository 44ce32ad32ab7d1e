//! Skeleton evaluation: threshold sweeps, thinning, tolerant matching,
//! precision/recall, F-measure, ODS/OIS/AP.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates; outside the image is background.
    pub fn get_or_false(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|&i| self.data[i])
            .map(|i| (i % self.width, i / self.width))
            .collect()
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(probs: &[f64], width: usize, height: usize, threshold: f64) -> Self {
        Mask {
            width,
            height,
            data: probs.iter().map(|&p| p > threshold).collect(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let half = T::from_f64_lossy(0.5);
        Mask {
            width: t.width(),
            height: t.height(),
            data: t.plane(0, 0).iter().map(|&v| v > half).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.height, self.width], |_, _, y, x| {
            if self.get(x, y) {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

// Neighbours P2..P9 clockwise from north.
const RING: [(isize, isize); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];
// North, south, east, west border directions.
const SIDES: [(isize, isize); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];

/// Whether removing the centre leaves the 8-connectivity of its
/// neighbourhood (and the 4-connectivity of the background) unchanged.
pub(crate) fn is_simple(n: [bool; 8]) -> bool {
    // Yokoi connectivity number in 8-connectivity.
    let mut c = 0;
    for k in [0usize, 2, 4, 6] {
        let (a, b, d) = (n[k], n[k + 1], n[(k + 2) % 8]);
        if !a && (b || d) {
            c += 1;
        }
    }
    c == 1
}

/// Foreground flags of the 8 neighbours, clockwise from north.
pub(crate) fn neighbourhood(m: &Mask, x: isize, y: isize) -> [bool; 8] {
    RING.map(|(dx, dy)| m.get_or_false(x + dx, y + dy))
}

/// Iterative directional thinning to unit-width, 8-connected curves.
///
/// Each pass deletes, for one side at a time, every border pixel on that side
/// that is simple and not an end point. Runs to a fixpoint, so `thin` is
/// idempotent.
pub fn thin(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut candidates: Vec<usize> = (0..out.data.len()).filter(|&i| out.data[i]).collect();
    let mut stamp = vec![0u32; out.data.len()];
    let mut epoch = 0u32;
    let neighbours = |m: &Mask, i: usize| -> [bool; 8] {
        let (x, y) = ((i % m.width) as isize, (i / m.width) as isize);
        RING.map(|(dx, dy)| m.get_or_false(x + dx, y + dy))
    };
    loop {
        let mut changed = false;
        let mut touched: Vec<usize> = Vec::new();
        for (sx, sy) in SIDES {
            let deletable: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&i| {
                    if !out.data[i] {
                        return false;
                    }
                    let (x, y) = ((i % mask.width) as isize, (i / mask.width) as isize);
                    if out.get_or_false(x + sx, y + sy) {
                        return false;
                    }
                    let n = neighbours(&out, i);
                    let count = n.iter().filter(|&&v| v).count();
                    count >= 2 && is_simple(n)
                })
                .collect();
            for &i in &deletable {
                out.data[i] = false;
                touched.push(i);
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Next pass only needs surviving candidates and neighbours of deletions.
        epoch += 1;
        let mut next = Vec::with_capacity(candidates.len());
        for &i in candidates.iter().chain(&touched) {
            let (x, y) = ((i % mask.width) as isize, (i / mask.width) as isize);
            for (dx, dy) in RING.iter().copied().chain([(0, 0)]) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if out.data[j] && stamp[j] != epoch && is_border(&out, nx, ny) {
                    stamp[j] = epoch;
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        candidates = next;
    }
    out
}

fn is_border(m: &Mask, x: isize, y: isize) -> bool {
    SIDES.iter().any(|&(dx, dy)| !m.get_or_false(x + dx, y + dy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// One-to-one greedy nearest matching within `tol` pixels.
///
/// Candidate pairs are visited by increasing distance (ties by prediction then
/// ground-truth raster order); a pair is accepted when both ends are free.
pub fn match_counts(pred: &Mask, gt: &Mask, tol: f64) -> Result<Counts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::invalid(
            "match_counts",
            format!("prediction is {}x{}, ground truth is {}x{}", pred.width, pred.height, gt.width, gt.height),
        ));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("match_counts", format!("tolerance must be non-negative, got {tol}")));
    }
    let p = pred.points();
    let g = gt.points();
    let tol2 = tol * tol;
    let r = tol.floor() as isize;
    let mut gt_index = vec![usize::MAX; gt.data.len()];
    for (k, &(x, y)) in g.iter().enumerate() {
        gt_index[y * gt.width + x] = k;
    }
    let mut pairs: Vec<(i64, usize, usize)> = Vec::new();
    for (pi, &(px, py)) in p.iter().enumerate() {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as i64;
                if d2 as f64 > tol2 {
                    continue;
                }
                let (x, y) = (px as isize + dx, py as isize + dy);
                if gt.get_or_false(x, y) {
                    pairs.push((d2, pi, gt_index[y as usize * gt.width + x as usize]));
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut used_p = vec![false; p.len()];
    let mut used_g = vec![false; g.len()];
    let mut tp = 0u64;
    for (_, pi, gi) in pairs {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            tp += 1;
        }
    }
    Ok(Counts {
        tp,
        fp: p.len() as u64 - tp,
        fn_: g.len() as u64 - tp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn new(threshold: f64, c: Counts) -> Self {
        PrPoint {
            threshold,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn f(&self) -> f64 {
        f_measure(self.precision, self.recall)
    }
}

/// `count` uniform thresholds strictly inside (0, 1): `i / (count + 1)`.
pub fn default_thresholds(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

pub const DEFAULT_THRESHOLD_COUNT: usize = 99;
pub const DEFAULT_TOLERANCE_FRAC: f64 = 0.0075;

/// Probability map with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
    pub gt: Mask,
}

impl EvalImage {
    pub fn new(probs: Vec<f64>, gt: Mask) -> Result<Self> {
        if probs.len() != gt.data.len() {
            return Err(Error::invalid(
                "eval",
                format!("probability map has {} pixels, ground truth {}", probs.len(), gt.data.len()),
            ));
        }
        Ok(EvalImage {
            width: gt.width,
            height: gt.height,
            probs,
            gt,
        })
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

/// Per-image and dataset-aggregated PR points.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<PrPoint>,
    pub per_image: Vec<Vec<PrPoint>>,
}

/// Binarizes, thins and matches every image at every threshold. The matching
/// tolerance of each image is `tolerance_frac` times its diagonal.
pub fn pr_sweep(images: &[EvalImage], thresholds: &[f64], tolerance_frac: f64) -> Result<Sweep> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("pr_sweep", "thresholds must be sorted ascending within [0, 1]"));
    }
    let mut totals = vec![Counts::default(); thresholds.len()];
    let mut per_image = Vec::with_capacity(images.len());
    for img in images {
        let gt = thin(&img.gt);
        let tol = tolerance_frac * img.diagonal();
        let mut pts = Vec::with_capacity(thresholds.len());
        for (k, &t) in thresholds.iter().enumerate() {
            let pred = thin(&Mask::threshold(&img.probs, img.width, img.height, t));
            let c = match_counts(&pred, &gt, tol)?;
            totals[k].add(c);
            pts.push(PrPoint::new(t, c));
        }
        per_image.push(pts);
    }
    let points = thresholds.iter().zip(totals).map(|(&t, c)| PrPoint::new(t, c)).collect();
    Ok(Sweep { points, per_image })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub points: Vec<PrPoint>,
    pub best_threshold: f64,
    pub f_measure: f64,
    pub ods: f64,
    pub ois: f64,
    pub ap: f64,
}

/// Index of the first maximum-F point.
fn best(points: &[PrPoint]) -> usize {
    let mut bi = 0;
    for (i, p) in points.iter().enumerate() {
        if p.f() > points[bi].f() {
            bi = i;
        }
    }
    bi
}

/// Trapezoidal area under precision-over-recall, anchored at recall 0 with
/// the precision of the lowest-recall point.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut pr: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pr.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pr.insert(0, (0.0, pr[0].1));
    pr.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn summarize(sweep: &Sweep) -> Result<EvalReport> {
    if sweep.points.is_empty() || sweep.per_image.is_empty() {
        return Err(Error::invalid("summarize", "needs at least one threshold and one image"));
    }
    let bi = best(&sweep.points);
    let ods = sweep.points[bi].f();
    let ois = sweep
        .per_image
        .iter()
        .map(|pts| pts.iter().map(PrPoint::f).fold(0.0, f64::max))
        .sum::<f64>()
        / sweep.per_image.len() as f64;
    Ok(EvalReport {
        points: sweep.points.clone(),
        best_threshold: sweep.points[bi].threshold,
        f_measure: ods,
        ods,
        ois,
        ap: average_precision(&sweep.points),
    })
}

pub fn evaluate(images: &[EvalImage], thresholds: &[f64], tolerance_frac: f64) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::invalid("evaluate", "no images to evaluate"));
    }
    summarize(&pr_sweep(images, thresholds, tolerance_frac)?)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,tp,fp,fn,precision,recall,f\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", p.threshold, p.tp, p.fp, p.fn_, p.precision, p.recall, p.f());
        }
        let _ = writeln!(s, "ODS={},OIS={},AP={}", self.ods, self.ois, self.ap);
        s
    }
}
