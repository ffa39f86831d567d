//! Clone/split densification and volume-score top-k pruning with a per-face floor.
//!
//! Both operations return the restructured set together with a row mapping
//! `mapping[new] = Some(old)` for splats that carry over their optimizer
//! state, `None` for newly created ones.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::mesh::TriangleFrame;
use crate::splats::{volume_score, RiggedGaussianSet};

pub const SPLIT_FACTOR: f64 = 1.6;
/// Paper-scale pruning budget.
pub const PAPER_TOP_K: usize = 25_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyThresholds {
    /// Mean positional-gradient norm above which a splat is densified.
    pub grad: f64,
    /// Largest global scale separating clone from split.
    pub size: f64,
    /// Clone offset along the descent direction, in units of the splat's largest local scale.
    pub clone_offset: f64,
}

impl Default for DensifyThresholds {
    fn default() -> Self {
        Self { grad: 1.5e-2, size: 0.05, clone_offset: 0.5 }
    }
}

/// Running positional-gradient statistics since the last densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub norm_sum: Vec<f64>,
    /// Sum of local-offset gradients, for the clone direction.
    pub dir_sum: Vec<Vec3>,
    pub count: Vec<u64>,
}

impl GradStats {
    pub fn new(g: usize) -> Self {
        Self { norm_sum: vec![0.0; g], dir_sum: vec![[0.0; 3]; g], count: vec![0; g] }
    }

    /// Adds one step: `global` are `∂L/∂μ'`, `local` are `∂L/∂μ`.
    pub fn accumulate(&mut self, global: &[Vec3], local: &[Vec3]) {
        for i in 0..self.count.len() {
            self.norm_sum[i] += math::norm(global[i]);
            self.dir_sum[i] = math::add(self.dir_sum[i], local[i]);
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
}

/// Clones small high-gradient splats and splits large ones into two children.
pub fn densify<R: Rng>(
    set: &RiggedGaussianSet,
    frames: &[TriangleFrame],
    stats: &GradStats,
    th: &DensifyThresholds,
    rng: &mut R,
) -> Result<(RiggedGaussianSet, Vec<Option<usize>>, DensifyReport)> {
    let g = set.len();
    if stats.count.len() != g {
        return Err(Error::shape("densify", format!("{} statistics for {g} splats", stats.count.len())));
    }
    let mut out = RiggedGaussianSet::empty(set.latent_dim);
    out.static_rgb = set.static_rgb.as_ref().map(|_| Vec::new());
    let mut mapping = Vec::with_capacity(g);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..g {
        if stats.mean(i) > th.grad {
            let k = frames[set.parent_face[i]].scale;
            let max_s = set.log_s[i].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).exp();
            if k * max_s < th.size {
                clones.push(i);
            } else {
                splits.push(i);
                continue;
            }
        }
        out.push_from(set, i);
        mapping.push(Some(i));
    }
    for &i in &clones {
        out.push_from(set, i);
        let max_s = set.log_s[i].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).exp();
        let d = stats.dir_sum[i];
        let n = math::norm(d);
        if n > 0.0 {
            let last = out.len() - 1;
            let step = math::scale(d, -th.clone_offset * max_s / n);
            out.mu_local[last] = math::add(out.mu_local[last], step);
        }
        mapping.push(None);
    }
    let shrink = SPLIT_FACTOR.ln();
    for &i in &splits {
        let rot = math::quat_to_mat(math::quat_normalize(set.q_local[i]));
        let s = set.log_s[i].map(f64::exp);
        for _ in 0..2 {
            let n: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
            let offset = math::mat_vec(&rot, [s[0] * n[0], s[1] * n[1], s[2] * n[2]]);
            out.push_from(set, i);
            let last = out.len() - 1;
            out.mu_local[last] = math::add(set.mu_local[i], offset);
            out.log_s[last] = set.log_s[i].map(|v| v - shrink);
            mapping.push(None);
        }
    }
    Ok((out, mapping, DensifyReport { cloned: clones.len(), split: splits.len() }))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed: usize,
    /// Removed splats restored to keep a face covered.
    pub reinserted: usize,
    /// Fresh centroid splats for faces that never had one.
    pub fresh: usize,
}

/// Descending score, ascending index.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` best scores, ties to the lower index, returned ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_score(scores));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Keeps the `k` splats with the largest `σ·s'x·s'y·s'z`, then restores one splat
/// on every face left uncovered.
pub fn prune_topk<R: Rng>(
    set: &RiggedGaussianSet,
    frames: &[TriangleFrame],
    k: usize,
    rng: &mut R,
) -> (RiggedGaussianSet, Vec<Option<usize>>, PruneReport) {
    let faces = frames.len();
    let scores = volume_score(set, frames);
    let mut keep = top_k_indices(&scores, k);
    let mut covered = vec![false; faces];
    for &i in &keep {
        covered[set.parent_face[i]] = true;
    }
    let mut kept = vec![false; set.len()];
    keep.iter().for_each(|&i| kept[i] = true);
    let mut best: Vec<Option<usize>> = vec![None; faces];
    let order = by_score(&scores);
    for i in 0..set.len() {
        let f = set.parent_face[i];
        if kept[i] || covered[f] {
            continue;
        }
        if best[f].is_none_or(|b| order(&i, &b) == Ordering::Less) {
            best[f] = Some(i);
        }
    }
    let reinserted: Vec<usize> = best.iter().flatten().copied().collect();
    keep.extend(&reinserted);
    keep.sort_unstable();

    let mut out = set.select(&keep);
    let mut mapping: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    let mut fresh = 0;
    for f in 0..faces {
        if !covered[f] && best[f].is_none() {
            out.push_fresh(f, rng);
            mapping.push(None);
            fresh += 1;
        }
    }
    let report = PruneReport { removed: set.len() - keep.len(), reinserted: reinserted.len(), fresh };
    (out, mapping, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::triangle_frames;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strip(faces: usize) -> Vec<TriangleFrame> {
        let mut pos = Vec::new();
        let mut tri = Vec::new();
        for i in 0..=faces {
            pos.push([i as f64, 0.0, 0.0]);
            pos.push([i as f64, 1.0, 0.0]);
        }
        for f in 0..faces {
            let b = 2 * (f / 2);
            tri.push(if f % 2 == 0 { [b, b + 2, b + 1] } else { [b + 1, b + 2, b + 3] });
        }
        triangle_frames(&pos, &tri).unwrap()
    }

    fn random_set(frames: &[TriangleFrame], g: usize, rng: &mut ChaCha8Rng) -> RiggedGaussianSet {
        let mut s = RiggedGaussianSet::empty(2);
        for _ in 0..g {
            s.push_fresh(rng.random_range(0..frames.len()), rng);
            let last = s.len() - 1;
            s.opacity_logit[last] = rng.random_range(-3.0..3.0);
            s.log_s[last] = std::array::from_fn(|_| rng.random_range(-3.0..0.0));
        }
        s
    }

    #[test]
    fn nothing_over_threshold_is_identity() {
        let fr = strip(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_set(&fr, 6, &mut rng);
        let (out, map, rep) = densify(&s, &fr, &GradStats::new(6), &DensifyThresholds::default(), &mut rng).unwrap();
        assert_eq!(out, s);
        assert_eq!(map, (0..6).map(Some).collect::<Vec<_>>());
        assert_eq!(rep, DensifyReport::default());
    }

    #[test]
    fn small_splat_is_cloned_on_same_face() {
        let fr = strip(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = RiggedGaussianSet::empty(2);
        s.push_fresh(1, &mut rng);
        s.log_s[0] = [-6.0; 3];
        let mut st = GradStats::new(1);
        st.accumulate(&[[1.0, 0.0, 0.0]], &[[0.0, 0.0, 2.0]]);
        let th = DensifyThresholds::default();
        let (out, map, rep) = densify(&s, &fr, &st, &th, &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.parent_face, vec![1, 1]);
        assert_eq!(out.latent_row(0), out.latent_row(1));
        assert!(out.mu_local[1][2] < 0.0);
        assert_eq!(map, vec![Some(0), None]);
        assert_eq!(rep.cloned, 1);
    }

    #[test]
    fn large_splat_splits_with_shrunk_scale() {
        let fr = strip(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = RiggedGaussianSet::empty(3);
        s.push_fresh(0, &mut rng);
        s.push_fresh(1, &mut rng);
        let mut st = GradStats::new(2);
        st.accumulate(&[[0.0, 1.0, 0.0], [0.0; 3]], &[[0.0; 3]; 2]);
        let (out, map, rep) = densify(&s, &fr, &st, &DensifyThresholds::default(), &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(map, vec![Some(1), None, None]);
        assert_eq!(rep.split, 1);
        for c in 1..3 {
            assert_eq!(out.parent_face[c], 0);
            assert_eq!(out.latent_row(c), s.latent_row(0));
            for a in 0..3 {
                assert!((out.log_s[c][a].exp() - s.log_s[0][a].exp() / SPLIT_FACTOR).abs() < 1e-15);
            }
        }
        assert_ne!(out.mu_local[1], out.mu_local[2]);
    }

    fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort();
        idx
    }

    #[test]
    fn top_k_matches_sort_oracle_with_ties() {
        let scores = [0.5, 0.9, 0.5, 0.1, 0.9, 0.5, 0.3, 0.0, 0.5, 0.2];
        for k in 0..=10 {
            assert_eq!(top_k_indices(&scores, k), sort_oracle(&scores, k));
        }
        assert_eq!(top_k_indices(&scores, 3), vec![0, 1, 4]);
    }

    #[test]
    fn prune_small_budget_keeps_floor() {
        let fr = strip(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = random_set(&fr, 10, &mut rng);
            let scores = volume_score(&s, &fr);
            let (out, map, rep) = prune_topk(&s, &fr, 3, &mut rng);
            let oracle = sort_oracle(&scores, 3);
            let survivors: Vec<usize> = map.iter().flatten().copied().collect();
            assert!(oracle.iter().all(|i| survivors.contains(i)));
            assert_eq!(survivors.len(), 3 + rep.reinserted);
            assert!(out.len() <= 3 + rep.reinserted + rep.fresh);
            for f in 0..fr.len() {
                assert!(out.parent_face.contains(&f), "face {f} uncovered");
            }
            out.validate(fr.len()).unwrap();
        }
    }

    #[test]
    fn prune_under_budget_is_identity() {
        let fr = strip(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_set(&fr, 2, &mut rng);
        for f in 0..3 {
            s.push_fresh(f, &mut rng);
        }
        let (out, map, rep) = prune_topk(&s, &fr, 10, &mut rng);
        assert_eq!(out, s);
        assert_eq!(map.len(), s.len());
        assert_eq!(rep, PruneReport::default());
    }
}
