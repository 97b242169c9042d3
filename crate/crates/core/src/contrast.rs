//! Confidence-weighted class prototypes, a per-class FIFO prototype bank and
//! the bidirectional prototype cross-contrast loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::{ConvGeom, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// A class whose total probability mass is below this fraction of the pixel
/// count produces no prototype.
pub const ABSENT_FRACTION: f64 = 1e-4;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// How stored prototypes are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `sum_k w_k p_k / sum_k w_k`.
    #[default]
    Weighted,
    /// `sum_k p_k / sum_k w_k`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau: f64,
    pub similarity: Similarity,
    pub aggregation: Aggregation,
    /// Pixels whose teacher confidence is below this are left out of the loss.
    pub confidence_threshold: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            similarity: Similarity::Cosine,
            aggregation: Aggregation::Weighted,
            confidence_threshold: 0.0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config("confidence threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-class prototype of one batch and its confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPrototypes<T> {
    /// `None` for classes with (almost) no probability mass.
    pub protos: Vec<Option<Vec<T>>>,
    /// Spatial mean of each class probability.
    pub weights: Vec<T>,
}

impl<T: Scalar> BatchPrototypes<T> {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

fn as_batch<'a, T: Scalar>(t: &'a Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, &'a [T])> {
    match t.shape() {
        [c, h, w] => Ok((1, *c, h * w, t.data())),
        [n, c, h, w] => Ok((*n, *c, h * w, t.data())),
        s => Err(Error::InvalidShape {
            op,
            msg: format!("expected [C, H, W] or [N, C, H, W], got {s:?}"),
        }),
    }
}

/// Prototypes `sum Z P_c / sum P_c` from features `[(N,) D, H, W]` and
/// class probabilities `[(N,) C, H, W]`, summed over the batch.
pub fn estimate_prototypes<T: Scalar>(z: &Tensor<T>, p: &Tensor<T>) -> Result<BatchPrototypes<T>> {
    let (n, d, plane, zd) = as_batch(z, "estimate_prototypes")?;
    let (np, c, plane_p, pd) = as_batch(p, "estimate_prototypes")?;
    if (n, plane) != (np, plane_p) {
        return Err(Error::shape("estimate_prototypes", z.shape(), p.shape()));
    }
    let pixels = T::from_usize(n * plane).expect("representable");
    let floor = T::lit(ABSENT_FRACTION) * pixels;
    let mut protos = Vec::with_capacity(c);
    let mut weights = Vec::with_capacity(c);
    for ch in 0..c {
        let mut mass = T::zero();
        let mut acc = vec![T::zero(); d];
        for i in 0..n {
            let pc = &pd[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            mass += pc.iter().copied().sum::<T>();
            for (k, a) in acc.iter_mut().enumerate() {
                let zk = &zd[(i * d + k) * plane..(i * d + k + 1) * plane];
                *a += zk.iter().zip(pc).map(|(&zv, &pv)| zv * pv).sum::<T>();
            }
        }
        weights.push(mass / pixels);
        protos.push((mass >= floor && mass > T::zero()).then(|| acc.into_iter().map(|a| a / mass).collect()));
    }
    Ok(BatchPrototypes { protos, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Weak,
    Strong,
}

impl View {
    fn index(self) -> usize {
        self as usize
    }
}

/// Per-view, per-class FIFO queues of `(prototype, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    capacity: usize,
    dim: usize,
    queues: [Vec<VecDeque<(Vec<T>, T)>>; 2],
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(classes: usize, dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("bank needs positive capacity, classes and dim".into()));
        }
        let empty = || (0..classes).map(|_| VecDeque::with_capacity(capacity)).collect();
        Ok(Self {
            capacity,
            dim,
            queues: [empty(), empty()],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.queues[0].len()
    }

    pub fn entries(&self, view: View, class: usize) -> &VecDeque<(Vec<T>, T)> {
        &self.queues[view.index()][class]
    }

    pub fn len(&self, view: View, class: usize) -> usize {
        self.entries(view, class).len()
    }

    /// Appends one entry per class with a prototype, evicting the oldest.
    pub fn push(&mut self, view: View, batch: &BatchPrototypes<T>) -> Result<()> {
        if batch.classes() != self.classes() {
            return Err(Error::shape("bank_push", &[self.classes()], &[batch.classes()]));
        }
        for (class, (proto, &w)) in batch.protos.iter().zip(&batch.weights).enumerate() {
            if let Some(p) = proto {
                self.push_entry(view, class, p.clone(), w)?;
            }
        }
        Ok(())
    }

    pub fn push_entry(&mut self, view: View, class: usize, proto: Vec<T>, weight: T) -> Result<()> {
        if proto.len() != self.dim {
            return Err(Error::shape("bank_push", &[self.dim], &[proto.len()]));
        }
        if !weight.is_finite() || proto.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "bank_push" });
        }
        let q = &mut self.queues[view.index()][class];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back((proto, weight));
        Ok(())
    }

    /// Combined prototype for a class, or `None` if its queue is empty.
    pub fn aggregate(&self, view: View, class: usize, mode: Aggregation) -> Option<Vec<T>> {
        let q = self.entries(view, class);
        if q.is_empty() {
            return None;
        }
        let total: T = q.iter().map(|(_, w)| *w).sum();
        if !(total > T::zero()) {
            return None;
        }
        let mut out = vec![T::zero(); self.dim];
        for (p, w) in q {
            let coef = match mode {
                Aggregation::Weighted => *w,
                Aggregation::Literal => T::one(),
            };
            for (o, &v) in out.iter_mut().zip(p) {
                *o += coef * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Some(out)
    }

    pub fn aggregate_all(&self, view: View, mode: Aggregation) -> Vec<Option<Vec<T>>> {
        (0..self.classes()).map(|c| self.aggregate(view, c, mode)).collect()
    }

    /// Restores the queues from `(view, class, entries)` lists, oldest first.
    pub fn set_entries(&mut self, view: View, class: usize, entries: Vec<(Vec<T>, T)>) -> Result<()> {
        if class >= self.classes() || entries.len() > self.capacity {
            return Err(Error::InvalidArgument(format!("bank restore for class {class} with {} entries", entries.len())));
        }
        self.queues[view.index()][class].clear();
        for (p, w) in entries {
            self.push_entry(view, class, p, w)?;
        }
        Ok(())
    }
}

/// Pixel-to-prototype InfoNCE for one view.
///
/// `z` is `[N, D, H, W]`; `protos` holds one optional prototype per class.
/// The softmax runs over the available classes only, and pixels whose
/// pseudo-label has no prototype (or is masked out by `keep`) are skipped.
/// Returns the mean over the remaining pixels, or `None` if there are none.
pub fn prototype_nce<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    protos: &[Option<Vec<T>>],
    labels: &[LabelMap],
    keep: Option<&[Vec<bool>]>,
    cfg: &ContrastConfig,
) -> Result<Option<Var>> {
    let (n, d, h, w) = g.value(z).dims4()?;
    if labels.len() != n || labels.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::InvalidShape {
            op: "prototype_nce",
            msg: format!("{} label maps for features {:?}", labels.len(), g.shape(z)),
        });
    }
    let available: Vec<usize> = (0..protos.len()).filter(|&c| protos[c].is_some()).collect();
    if available.is_empty() {
        return Ok(None);
    }
    let mut slot = vec![None; protos.len()];
    for (k, &c) in available.iter().enumerate() {
        slot[c] = Some(k);
    }
    let plane = h * w;
    let ca = available.len();
    let mut pick = vec![T::zero(); n * ca * plane];
    let mut eligible = 0usize;
    for (i, m) in labels.iter().enumerate() {
        for (k, &l) in m.data().iter().enumerate() {
            let kept = keep.is_none_or(|kp| kp[i][k]);
            if let (true, Some(Some(s))) = (kept, slot.get(l as usize)) {
                pick[(i * ca + s) * plane + k] = T::one();
                eligible += 1;
            }
        }
    }
    if eligible == 0 {
        return Ok(None);
    }
    let mut weight = Vec::with_capacity(ca * d);
    for &c in &available {
        let p = protos[c].as_ref().expect("available");
        if p.len() != d {
            return Err(Error::shape("prototype_nce", &[d], &[p.len()]));
        }
        let scale = match cfg.similarity {
            Similarity::Cosine => {
                let norm = p.iter().map(|&v| v * v).sum::<T>().sqrt();
                T::one() / norm.max(T::lit(NORM_EPS))
            }
            Similarity::Dot => T::one(),
        };
        weight.extend(p.iter().map(|&v| v * scale));
    }
    let feats = match cfg.similarity {
        Similarity::Cosine => g.l2_normalize_channels(z, T::lit(NORM_EPS))?,
        Similarity::Dot => z,
    };
    let wv = g.constant(Tensor::new(vec![ca, d, 1, 1], weight)?);
    let sim = g.conv2d(feats, wv, None, ConvGeom::default())?;
    let logits = g.scale(sim, T::lit(1.0 / cfg.tau))?;
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(Tensor::new(vec![n, ca, h, w], pick)?);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    Ok(Some(g.scale(total, -T::one() / T::from_usize(eligible).expect("representable"))?))
}

/// Which directions of the cross-contrast are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Directions {
    /// Weak-view features against strong-view prototypes.
    pub weak: bool,
    /// Strong-view features against weak-view prototypes.
    pub strong: bool,
}

impl Default for Directions {
    fn default() -> Self {
        Self { weak: true, strong: true }
    }
}

pub struct ContrastInput<'a, T> {
    pub z_weak: Var,
    pub z_strong: Var,
    pub protos_weak: &'a [Option<Vec<T>>],
    pub protos_strong: &'a [Option<Vec<T>>],
    pub labels_weak: &'a [LabelMap],
    pub labels_strong: &'a [LabelMap],
    pub keep_weak: Option<&'a [Vec<bool>]>,
    pub keep_strong: Option<&'a [Vec<bool>]>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ContrastTerms {
    pub weak: Option<Var>,
    pub strong: Option<Var>,
    /// Mean of the available directional terms.
    pub loss: Option<Var>,
}

pub fn cross_contrast_loss<T: Scalar>(
    g: &mut Graph<T>,
    input: &ContrastInput<'_, T>,
    dirs: Directions,
    cfg: &ContrastConfig,
) -> Result<ContrastTerms> {
    cfg.validate()?;
    let weak = if dirs.weak {
        prototype_nce(g, input.z_weak, input.protos_strong, input.labels_weak, input.keep_weak, cfg)?
    } else {
        None
    };
    let strong = if dirs.strong {
        prototype_nce(g, input.z_strong, input.protos_weak, input.labels_strong, input.keep_strong, cfg)?
    } else {
        None
    };
    let loss = match (weak, strong) {
        (Some(a), Some(b)) => {
            let s = g.add(a, b)?;
            Some(g.scale(s, T::lit(0.5))?)
        }
        (a, b) => a.or(b),
    };
    Ok(ContrastTerms { weak, strong, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let raw = Tensor::from_fn(vec![1, c, h, w], |_| rng.random_range(-2.0..2.0));
        crate::numerics::softmax_channels(&raw, false).unwrap().reshape(vec![c, h, w]).unwrap()
    }

    #[test]
    fn uniform_probs_give_feature_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = rand_tensor(&mut rng, &[3, 4, 5]);
        let p = Tensor::full(vec![4, 4, 5], 0.25);
        let b = estimate_prototypes(&z, &p).unwrap();
        for proto in &b.protos {
            let proto = proto.as_ref().unwrap();
            for (d, v) in proto.iter().enumerate() {
                let mean = z.data()[d * 20..(d + 1) * 20].iter().sum::<f64>() / 20.0;
                assert!((v - mean).abs() < 1e-12);
            }
        }
        assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_probs_give_class_means_and_absent_classes() {
        let z = Tensor::from_f64(vec![1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        let p = Tensor::from_f64(vec![3, 2, 2], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = estimate_prototypes(&z, &p).unwrap();
        assert_eq!(b.protos[0], Some(vec![2.0]));
        assert_eq!(b.protos[1], Some(vec![6.0]));
        assert_eq!(b.protos[2], None);
        assert_eq!(b.weights, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn prototypes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_tensor(&mut rng, &[6, 7, 5]);
        let p = rand_probs(&mut rng, 4, 7, 5);
        let b = estimate_prototypes(&z, &p).unwrap();
        for c in 0..4 {
            for d in 0..6 {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..7 {
                    for j in 0..5 {
                        num += z.data()[(d * 7 + i) * 5 + j] * p.data()[(c * 7 + i) * 5 + j];
                        den += p.data()[(c * 7 + i) * 5 + j];
                    }
                }
                assert!((b.protos[c].as_ref().unwrap()[d] - num / den).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fifo_small_cases() {
        let mut bank = PrototypeBank::<f64>::new(1, 1, 2).unwrap();
        for v in [1.0, 2.0, 3.0] {
            bank.push_entry(View::Weak, 0, vec![v], 1.0).unwrap();
        }
        let held: Vec<f64> = bank.entries(View::Weak, 0).iter().map(|e| e.0[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        assert_eq!(bank.len(View::Strong, 0), 0);
        let mut one = PrototypeBank::<f64>::new(1, 1, 1).unwrap();
        for v in [4.0, 5.0] {
            one.push_entry(View::Strong, 0, vec![v], 0.3).unwrap();
            assert_eq!(one.aggregate(View::Strong, 0, Aggregation::Weighted), Some(vec![v]));
        }
    }

    #[test]
    fn aggregate_cases() {
        let mut bank = PrototypeBank::<f64>::new(2, 2, 4).unwrap();
        assert_eq!(bank.aggregate(View::Weak, 0, Aggregation::Weighted), None);
        bank.push_entry(View::Weak, 0, vec![1.0, 2.0], 0.2).unwrap();
        assert_eq!(bank.aggregate(View::Weak, 0, Aggregation::Weighted), Some(vec![1.0, 2.0]));
        bank.push_entry(View::Weak, 0, vec![3.0, 6.0], 0.2).unwrap();
        let a = bank.aggregate(View::Weak, 0, Aggregation::Weighted).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-15 && (a[1] - 4.0).abs() < 1e-15);
        let lit = bank.aggregate(View::Weak, 0, Aggregation::Literal).unwrap();
        assert!((lit[0] - 10.0).abs() < 1e-12);
        assert!(bank.push_entry(View::Weak, 1, vec![f64::NAN, 0.0], 1.0).is_err());
        assert!(bank.push_entry(View::Weak, 1, vec![0.0], 1.0).is_err());
    }

    /// Direct per-pixel evaluation of the InfoNCE term.
    fn nce_oracle(z: &Tensor<f64>, protos: &[Option<Vec<f64>>], labels: &[LabelMap], tau: f64) -> f64 {
        let (n, d, h, w) = z.dims4().unwrap();
        let (mut acc, mut count) = (0.0, 0);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let l = labels[i].get(y, x) as usize;
                    if protos[l].is_none() {
                        continue;
                    }
                    let f: Vec<f64> = (0..d).map(|k| z.at4(i, k, y, x)).collect();
                    let cos = |p: &[f64]| {
                        let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
                        let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                        dot / (nf * np)
                    };
                    let denom: f64 = protos.iter().flatten().map(|p| (cos(p) / tau).exp()).sum();
                    acc -= ((cos(protos[l].as_ref().unwrap()) / tau).exp() / denom).ln();
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    fn eval_nce(z: &Tensor<f64>, protos: &[Option<Vec<f64>>], labels: &[LabelMap], tau: f64) -> Option<f64> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cfg = ContrastConfig { tau, ..ContrastConfig::default() };
        prototype_nce(&mut g, zv, protos, labels, None, &cfg).unwrap().map(|v| g.value(v).item())
    }

    #[test]
    fn identical_prototypes_give_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_tensor(&mut rng, &[1, 4, 3, 3]);
        let p = vec![0.3, -0.2, 0.9, 0.1];
        let protos = vec![Some(p.clone()), Some(p.clone()), Some(p)];
        let labels = vec![LabelMap::new(3, 3, (0..9).map(|i| (i % 3) as u8).collect()).unwrap()];
        for tau in [0.1, 1.0, 7.0] {
            assert!((eval_nce(&z, &protos, &labels, tau).unwrap() - 3f64.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_prototypes_closed_form() {
        let z = Tensor::from_f64(vec![1, 2, 1, 2], &[2.0, 0.0, 0.0, 0.5]).unwrap();
        let protos = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let labels = vec![LabelMap::new(1, 2, vec![0, 1]).unwrap()];
        for tau in [0.5, 1.0] {
            let expect = (1.0 + (-1.0 / tau as f64).exp()).ln();
            assert!((eval_nce(&z, &protos, &labels, tau).unwrap() - expect).abs() < 1e-10);
        }
        assert!((eval_nce(&z, &protos, &labels, 1.0).unwrap() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn missing_classes_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let protos: Vec<Option<Vec<f64>>> = vec![Some(vec![0.5, 0.1, -0.3]), None, Some(vec![-0.2, 0.8, 0.4])];
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3u8)).collect()).unwrap())
            .collect();
        let v = eval_nce(&z, &protos, &labels, 0.7).unwrap();
        assert!((v - nce_oracle(&z, &protos, &labels, 0.7)).abs() < 1e-12);
        let only_missing = vec![LabelMap::filled(4, 4, 1); 2];
        assert_eq!(eval_nce(&z, &protos, &only_missing, 1.0), None);
        assert_eq!(eval_nce(&z, &[None, None, None], &labels, 1.0), None);
    }

    #[test]
    fn confidence_mask_drops_pixels() {
        let z = Tensor::from_f64(vec![1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let protos = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let labels = vec![LabelMap::new(1, 2, vec![0, 0]).unwrap()];
        let keep = vec![vec![true, false]];
        let mut g = Graph::new();
        let zv = g.constant(z);
        let v = prototype_nce(&mut g, zv, &protos, &labels, Some(&keep), &ContrastConfig::default()).unwrap().unwrap();
        assert!((g.value(v).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_direction_and_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zw = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        let zs = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        let pw: Vec<Option<Vec<f64>>> = (0..3).map(|_| Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let ps: Vec<Option<Vec<f64>>> = (0..3).map(|_| Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let lw = vec![LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..3u8)).collect()).unwrap()];
        let ls = vec![LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..3u8)).collect()).unwrap()];
        let run = |a: &Tensor<f64>, b: &Tensor<f64>, pa: &[Option<Vec<f64>>], pb: &[Option<Vec<f64>>], la: &[LabelMap], lb: &[LabelMap], dirs| {
            let mut g = Graph::new();
            let (za, zb) = (g.constant(a.clone()), g.constant(b.clone()));
            let input = ContrastInput {
                z_weak: za,
                z_strong: zb,
                protos_weak: pa,
                protos_strong: pb,
                labels_weak: la,
                labels_strong: lb,
                keep_weak: None,
                keep_strong: None,
            };
            let t = cross_contrast_loss(&mut g, &input, dirs, &ContrastConfig::default()).unwrap();
            g.value(t.loss.unwrap()).item()
        };
        let both = run(&zw, &zs, &pw, &ps, &lw, &ls, Directions::default());
        let swapped = run(&zs, &zw, &ps, &pw, &ls, &lw, Directions::default());
        assert!((both - swapped).abs() < 1e-14);
        let lw_only = run(&zw, &zs, &pw, &ps, &lw, &ls, Directions { weak: true, strong: false });
        let ls_only = run(&zw, &zs, &pw, &ps, &lw, &ls, Directions { weak: false, strong: true });
        assert!((lw_only - nce_oracle(&zw, &ps, &lw, 1.0)).abs() < 1e-12);
        assert!((ls_only - nce_oracle(&zs, &pw, &ls, 1.0)).abs() < 1e-12);
        assert!((both - 0.5 * (lw_only + ls_only)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn bank_keeps_last_k(seed in any::<u64>(), k in 1usize..6, pushes in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = PrototypeBank::<f64>::new(1, 2, k).unwrap();
            let mut log = Vec::new();
            for _ in 0..pushes {
                let e = (vec![rng.random::<f64>(), rng.random::<f64>()], rng.random::<f64>());
                bank.push_entry(View::Weak, 0, e.0.clone(), e.1).unwrap();
                log.push(e);
                prop_assert!(bank.len(View::Weak, 0) <= k);
            }
            let expect: Vec<_> = log.iter().skip(log.len().saturating_sub(k)).cloned().collect();
            prop_assert!(bank.entries(View::Weak, 0).iter().cloned().eq(expect));
        }

        #[test]
        fn prototypes_in_feature_hull(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = rand_tensor(&mut rng, &[3, 4, 4]);
            let p = rand_probs(&mut rng, 3, 4, 4);
            let b = estimate_prototypes(&z, &p).unwrap();
            for proto in b.protos.iter().flatten() {
                for (d, v) in proto.iter().enumerate() {
                    let row = &z.data()[d * 16..(d + 1) * 16];
                    let (lo, hi) = row.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn loss_bounded_and_scale_invariant(seed in any::<u64>(), s in 0.1f64..10.0, tau in 0.2f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = rand_tensor(&mut rng, &[1, 3, 3, 3]);
            let protos: Vec<Option<Vec<f64>>> = (0..4).map(|_| Some((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
            let labels = vec![LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..4u8)).collect()).unwrap()];
            let v = eval_nce(&z, &protos, &labels, tau).unwrap();
            prop_assert!(v >= 0.0 && v <= 4f64.ln() + 2.0 / tau + 1e-12);
            let scaled: Vec<Option<Vec<f64>>> = protos.iter().map(|p| p.as_ref().map(|p| p.iter().map(|x| x * s).collect())).collect();
            let v2 = eval_nce(&z.map(|x| x * s), &scaled, &labels, tau).unwrap();
            prop_assert!((v - v2).abs() < 1e-12);
        }
    }
}
