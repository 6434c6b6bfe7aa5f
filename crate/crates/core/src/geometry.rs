//! Decision regions of the EMS classifier.
//!
//! With margin `m > 1`, the set of points the classifier assigns to `y`
//! rather than `y'`, `{x : m·d(x, c_y) ≤ d(x, c_y')}`, is a ball:
//!
//! ```text
//! center = c_y + (c_y - c_y') / (m² - 1)
//! radius = m / (m² - 1) · ‖c_y - c_y'‖
//! ```
//!
//! For two classes this gives closed-form intra/inter-class extremes, which
//! cross exactly at `m = 2 + √3`. For more classes the region of `y` is the
//! intersection of its balls and is explored by Monte-Carlo sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, sq_dist, sub, Matrix};
use crate::losses::PrototypeSet;

/// Points within this distance of a sphere are not counted as disagreements.
pub const BOUNDARY_BAND: f64 = 1e-9;
/// Slack for ball-containment comparisons.
pub const CONTAINMENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BallRegion {
    pub fn contains_point(&self, x: &[f64]) -> bool {
        dist(x, &self.center) <= self.radius
    }

    /// Whether `inner` lies inside `self`.
    pub fn contains_ball(&self, inner: &BallRegion) -> bool {
        dist(&self.center, &inner.center) + inner.radius <= self.radius + CONTAINMENT_TOL
    }
}

fn check_margin(m: f64) -> Result<()> {
    if !m.is_finite() || m <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "decision regions are balls only for m > 1, got {m}"
        )));
    }
    Ok(())
}

fn check_pair(c_y: &[f64], c_yp: &[f64]) -> Result<()> {
    if c_y.len() != c_yp.len() {
        return Err(Error::DimensionMismatch(format!(
            "centers of dimension {} and {}",
            c_y.len(),
            c_yp.len()
        )));
    }
    if c_y.iter().chain(c_yp).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("centers"));
    }
    if c_y == c_yp {
        return Err(Error::InvalidParameter("coincident centers".into()));
    }
    Ok(())
}

/// Closed-form ball `R_{y,y'}` of points at least `m` times closer to `c_y`
/// than to `c_y'`.
pub fn decision_ball(c_y: &[f64], c_yp: &[f64], m: f64) -> Result<BallRegion> {
    check_margin(m)?;
    check_pair(c_y, c_yp)?;
    let k = m * m - 1.0;
    let center = c_y.iter().zip(c_yp).map(|(a, b)| a + (a - b) / k).collect();
    Ok(BallRegion {
        center,
        radius: m / k * dist(c_y, c_yp),
    })
}

/// Largest intra-class and smallest inter-class distance over the two
/// decision balls of a binary problem with centers `dist` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginBounds {
    pub max_intra: f64,
    pub min_inter: f64,
}

pub fn binary_margin_bounds(m: f64, dist: f64) -> Result<MarginBounds> {
    check_margin(m)?;
    if !(dist > 0.0 && dist.is_finite()) {
        return Err(Error::InvalidParameter(format!("center distance must be positive, got {dist}")));
    }
    let k = m * m - 1.0;
    Ok(MarginBounds {
        max_intra: 2.0 * m / k * dist,
        min_inter: (m * m - 2.0 * m + 1.0) / k * dist,
    })
}

/// Smallest margin for which every class region is tighter than its gap to
/// any other region: the larger root of `m² - 4m + 1`.
pub fn minimum_margin() -> f64 {
    2.0 + 3f64.sqrt()
}

/// Samples `n_samples` points uniformly in a box of half-width twice the
/// radius around the ball, and counts points where ball membership and the
/// defining inequality disagree (ignoring a [`BOUNDARY_BAND`] at the sphere).
pub fn verify_region_membership(
    c_y: &[f64],
    c_yp: &[f64],
    m: f64,
    n_samples: usize,
    seed: u64,
) -> Result<u64> {
    let ball = decision_ball(c_y, c_yp, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 2.0 * ball.radius;
    let mut x = vec![0.0; c_y.len()];
    let mut disagreements = 0;
    for _ in 0..n_samples {
        for (xi, ci) in x.iter_mut().zip(&ball.center) {
            *xi = ci + rng.random_range(-half..=half);
        }
        let r = dist(&x, &ball.center);
        if (r - ball.radius).abs() <= BOUNDARY_BAND {
            continue;
        }
        let by_inequality = m * dist(&x, c_y) <= dist(&x, c_yp);
        if by_inequality != (r <= ball.radius) {
            disagreements += 1;
        }
    }
    Ok(disagreements)
}

/// Whether raising the margin from `m` to `m + eps` shrinks the region into
/// itself.
pub fn verify_monotonicity(c_y: &[f64], c_yp: &[f64], m: f64, eps: f64) -> Result<bool> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
    }
    let big = decision_ball(c_y, c_yp, m)?;
    let small = decision_ball(c_y, c_yp, m + eps)?;
    Ok(big.contains_ball(&small))
}

/// `‖c_a - c_other‖ ≥ (m+1)/(m-1) · ‖c_a - c_b‖`: when it holds, the region
/// of `a` against `b` lies inside its region against `other`, so `other`
/// does not constrain `a`.
pub fn isolation_condition(c_a: &[f64], c_b: &[f64], c_other: &[f64], m: f64) -> Result<bool> {
    check_margin(m)?;
    if c_a.len() != c_b.len() || c_a.len() != c_other.len() {
        return Err(Error::DimensionMismatch("centers differ in dimension".into()));
    }
    let need = (m + 1.0) / (m - 1.0) * dist(c_a, c_b);
    Ok(dist(c_a, c_other) >= need * (1.0 - CONTAINMENT_TOL))
}

/// Monte-Carlo estimates of the class regions' extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub margin: f64,
    pub classes: usize,
    /// Largest sampled distance within each class region; `None` when no
    /// sample landed in the region.
    pub max_intra: Vec<Option<f64>>,
    /// Smallest sampled distance between each pair of class regions.
    pub min_inter: Vec<PairDistance>,
    /// Ordered pairs `(y, y')` with `max_intra[y] > min_inter(y, y')`.
    pub violations: usize,
    pub violating_pairs: Vec<(usize, usize)>,
    pub samples_used: usize,
    pub accepted: Vec<usize>,
    pub empty_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub distance: Option<f64>,
}

impl RegionReport {
    pub fn min_inter_between(&self, a: usize, b: usize) -> Option<f64> {
        let (a, b) = (a.min(b), a.max(b));
        self.min_inter
            .iter()
            .find(|p| p.a == a && p.b == b)
            .and_then(|p| p.distance)
    }
}

fn uniform_in_ball(ball: &BallRegion, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = norm(out);
        if n > 0.0 {
            let r = ball.radius * rng.random::<f64>().powf(1.0 / out.len() as f64);
            for (v, c) in out.iter_mut().zip(&ball.center) {
                *v = c + *v / n * r;
            }
            return;
        }
    }
}

/// Uniform samples from each class region `R_y`, drawn by rejection inside
/// the smallest ball `R_{y,y'}`. Draws `n_samples / K` candidates per class;
/// class `y` uses stream `y` of the seeded generator.
pub fn sample_regions(protos: &PrototypeSet, m: f64, n_samples: usize, seed: u64) -> Result<Vec<Matrix>> {
    check_margin(m)?;
    let k = protos.num_classes();
    if k < 2 {
        return Err(Error::InvalidParameter("need at least two prototypes".into()));
    }
    for a in 0..k {
        for b in a + 1..k {
            check_pair(protos.center(a), protos.center(b))?;
        }
    }
    let d = protos.dim();
    let per_class = (n_samples / k).max(1);
    let mut out = Vec::with_capacity(k);
    for y in 0..k {
        let balls: Vec<BallRegion> = (0..k)
            .filter(|&j| j != y)
            .map(|j| decision_ball(protos.center(y), protos.center(j), m))
            .collect::<Result<_>>()?;
        let smallest = balls
            .iter()
            .min_by(|a, b| a.radius.total_cmp(&b.radius))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(y as u64);
        let mut pts = Vec::new();
        let mut x = vec![0.0; d];
        let cy = protos.center(y);
        for _ in 0..per_class {
            uniform_in_ball(smallest, &mut rng, &mut x);
            let dy = m * dist(&x, cy);
            if (0..k).filter(|&j| j != y).all(|j| dy <= dist(&x, protos.center(j))) {
                pts.extend_from_slice(&x);
            }
        }
        let rows = pts.len() / d;
        out.push(Matrix::from_vec(rows, d, pts)?);
    }
    Ok(out)
}

const EXACT_PAIR_LIMIT: usize = 4_000_000;
const RANDOM_DIRECTIONS: usize = 64;
const CANDIDATES: usize = 256;

/// Largest distance between two rows of `pts`. Exact for small sets; for
/// large sets, exact over the extreme points along the axes and a fixed
/// family of random directions. Either way the result is a distance between
/// two actual rows, so it never exceeds the true diameter of the region.
pub fn sampled_diameter(pts: &Matrix) -> Option<f64> {
    let n = pts.rows();
    if n == 0 {
        return None;
    }
    if n * n <= EXACT_PAIR_LIMIT {
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(sq_dist(pts.row(i), pts.row(j)));
            }
        }
        return Some(best.sqrt());
    }
    let d = pts.cols();
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .map(|a| (0..d).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..RANDOM_DIRECTIONS {
        dirs.push((0..d).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    let mut cand = Vec::new();
    for u in &dirs {
        let (mut lo, mut hi) = ((f64::INFINITY, 0), (f64::NEG_INFINITY, 0));
        for (i, row) in pts.iter_rows().enumerate() {
            let p = dot(row, u);
            if p < lo.0 {
                lo = (p, i);
            }
            if p > hi.0 {
                hi = (p, i);
            }
        }
        cand.push(lo.1);
        cand.push(hi.1);
    }
    cand.sort_unstable();
    cand.dedup();
    let mut best: f64 = 0.0;
    for (a, &i) in cand.iter().enumerate() {
        for &j in &cand[a + 1..] {
            best = best.max(sq_dist(pts.row(i), pts.row(j)));
        }
    }
    Some(best.sqrt())
}

fn top_by<F: Fn(&[f64]) -> f64>(pts: &Matrix, score: F, count: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = pts.iter_rows().enumerate().map(|(i, r)| (score(r), i)).collect();
    let count = count.min(idx.len());
    if count < idx.len() {
        idx.select_nth_unstable_by(count, |a, b| a.0.total_cmp(&b.0));
        idx.truncate(count);
    }
    idx.into_iter().map(|(_, i)| i).collect()
}

fn centroid(pts: &Matrix) -> Vec<f64> {
    let mut c = vec![0.0; pts.cols()];
    for r in pts.iter_rows() {
        crate::linalg::axpy(1.0, r, &mut c);
    }
    c.iter_mut().for_each(|v| *v /= pts.rows() as f64);
    c
}

/// Smallest distance between a row of `a` and a row of `b`. Exact for small
/// sets; otherwise exact over the rows of each set facing the other (largest
/// projection on the centroid gap, or nearest to the other centroid). The
/// result is always an attained pair distance, so it never undercuts the
/// true gap between the regions.
pub fn sampled_gap(a: &Matrix, b: &Matrix) -> Option<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return None;
    }
    let exact = |ia: &[usize], ib: &[usize]| {
        let mut best = f64::INFINITY;
        for &i in ia {
            for &j in ib {
                best = best.min(sq_dist(a.row(i), b.row(j)));
            }
        }
        best.sqrt()
    };
    if a.rows() * b.rows() <= EXACT_PAIR_LIMIT {
        let ia: Vec<usize> = (0..a.rows()).collect();
        let ib: Vec<usize> = (0..b.rows()).collect();
        return Some(exact(&ia, &ib));
    }
    let ca = centroid(a);
    let cb = centroid(b);
    let u = sub(&cb, &ca);
    let mut ia = top_by(a, |r| -dot(r, &u), CANDIDATES);
    ia.extend(top_by(a, |r| sq_dist(r, &cb), CANDIDATES));
    ia.sort_unstable();
    ia.dedup();
    let mut ib = top_by(b, |r| dot(r, &u), CANDIDATES);
    ib.extend(top_by(b, |r| sq_dist(r, &ca), CANDIDATES));
    ib.sort_unstable();
    ib.dedup();
    Some(exact(&ia, &ib))
}

/// Estimates, per class region, the largest intra-region distance and, per
/// pair, the smallest inter-region distance, and counts ordered pairs where
/// the former exceeds the latter. Sampling can only shrink the observed
/// diameters and widen the observed gaps, so a margin that satisfies the
/// property exactly always reports zero violations.
pub fn verify_p2(protos: &PrototypeSet, m: f64, n_samples: usize, seed: u64) -> Result<RegionReport> {
    let samples = sample_regions(protos, m, n_samples, seed)?;
    let k = protos.num_classes();
    let max_intra: Vec<Option<f64>> = samples.iter().map(sampled_diameter).collect();
    let mut min_inter = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            min_inter.push(PairDistance {
                a,
                b,
                distance: sampled_gap(&samples[a], &samples[b]),
            });
        }
    }
    let mut report = RegionReport {
        margin: m,
        classes: k,
        max_intra,
        min_inter,
        violations: 0,
        violating_pairs: Vec::new(),
        samples_used: (n_samples / k).max(1) * k,
        accepted: samples.iter().map(Matrix::rows).collect(),
        empty_classes: samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.rows() == 0)
            .map(|(i, _)| i)
            .collect(),
    };
    for y in 0..k {
        for yp in 0..k {
            if y == yp {
                continue;
            }
            if let (Some(intra), Some(inter)) = (report.max_intra[y], report.min_inter_between(y, yp)) {
                if intra > inter {
                    report.violating_pairs.push((y, yp));
                }
            }
        }
    }
    report.violations = report.violating_pairs.len();
    Ok(report)
}
