//! Style-guided distribution blending: strip a labeled image of its
//! intensity moments and re-project it with a mix of its own style and the
//! style of a random unlabeled image.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;

/// First and second intensity moments of an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style<T> {
    pub mu: T,
    /// `sqrt(variance + eps)`, so never below `sqrt(eps)`.
    pub sigma: T,
}

impl<T: Scalar> Style<T> {
    pub fn mix(&self, other: &Style<T>, eta: T) -> Style<T> {
        let one = T::one();
        Style {
            mu: eta * self.mu + (one - eta) * other.mu,
            sigma: eta * self.sigma + (one - eta) * other.sigma,
        }
    }
}

pub fn image_style<T: Scalar>(image: &Tensor<T>, eps: T) -> Result<Style<T>> {
    if image.is_empty() {
        return Err(Error::Empty("style of an empty image".into()));
    }
    let mu = image.mean();
    let n = T::from_usize(image.len()).expect("representable");
    let var = image.data().iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    Ok(Style {
        mu,
        sigma: (var + eps).sqrt(),
    })
}

/// Zero-mean content `(x - mu) / sigma`.
pub fn normalize_content<T: Scalar>(image: &Tensor<T>, style: &Style<T>) -> Tensor<T> {
    image.map(|v| (v - style.mu) / style.sigma)
}

fn check_eta<T: Scalar>(eta: T) -> Result<()> {
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::InvalidArgument(format!("mixing coefficient {eta} outside [0, 1]")));
    }
    Ok(())
}

/// Re-projects `content` with the mixed style; returns the image and the mix.
pub fn blend_style<T: Scalar>(
    content: &Tensor<T>,
    style_l: &Style<T>,
    style_u: &Style<T>,
    eta: T,
) -> Result<(Tensor<T>, Style<T>)> {
    check_eta(eta)?;
    let m = style_l.mix(style_u, eta);
    Ok((content.map(|v| v * m.sigma + m.mu), m))
}

/// Distribution of the per-image mixing coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EtaDistribution {
    Uniform,
    Beta { a: f64, b: f64 },
    Bernoulli { p: f64 },
    Constant { value: f64 },
}

impl Default for EtaDistribution {
    fn default() -> Self {
        EtaDistribution::Uniform
    }
}

impl EtaDistribution {
    pub fn beta() -> Self {
        EtaDistribution::Beta { a: 0.5, b: 0.5 }
    }

    pub fn bernoulli() -> Self {
        EtaDistribution::Bernoulli { p: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EtaDistribution::Uniform => true,
            EtaDistribution::Beta { a, b } => a > 0.0 && b > 0.0,
            EtaDistribution::Bernoulli { p } => (0.0..=1.0).contains(&p),
            EtaDistribution::Constant { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid eta distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            EtaDistribution::Uniform => rng.random::<f64>(),
            EtaDistribution::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng),
            EtaDistribution::Bernoulli { p } => {
                if rng.random_bool(p) {
                    1.0
                } else {
                    0.0
                }
            }
            EtaDistribution::Constant { value } => value,
        }
    }
}

/// A labeled batch of `(image, mask)` pairs and an unlabeled batch.
#[derive(Clone, Copy, Debug)]
pub struct BlendBatchPair<'a, T> {
    pub labeled: &'a [(Tensor<T>, LabelMap)],
    pub unlabeled: &'a [Tensor<T>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendedSample<T> {
    pub image: Tensor<T>,
    pub mask: LabelMap,
    /// Index into the unlabeled batch whose style was used.
    pub style_source: usize,
    pub eta: T,
    pub mixed: Style<T>,
}

/// Draws one unlabeled style index per labeled image: without replacement
/// when there are enough unlabeled images, with replacement otherwise.
pub fn assign_styles(labeled: usize, unlabeled: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if unlabeled == 0 {
        return Err(Error::Empty("style blending needs at least one unlabeled image".into()));
    }
    Ok(if unlabeled >= labeled {
        index::sample(rng, unlabeled, labeled).into_vec()
    } else {
        (0..labeled).map(|_| rng.random_range(0..unlabeled)).collect()
    })
}

pub fn blend_batch<T: Scalar>(
    pair: BlendBatchPair<'_, T>,
    eta_dist: &EtaDistribution,
    eps: T,
    rng: &mut impl Rng,
) -> Result<Vec<BlendedSample<T>>> {
    eta_dist.validate()?;
    let sources = assign_styles(pair.labeled.len(), pair.unlabeled.len(), rng)?;
    let etas: Vec<T> = (0..pair.labeled.len()).map(|_| T::lit(eta_dist.sample(rng))).collect();
    pair.labeled
        .iter()
        .zip(sources)
        .zip(etas)
        .map(|(((image, mask), src), eta)| {
            let style_l = image_style(image, eps)?;
            let style_u = image_style(&pair.unlabeled[src], eps)?;
            let content = normalize_content(image, &style_l);
            let (image, mixed) = blend_style(&content, &style_l, &style_u, eta)?;
            Ok(BlendedSample {
                image,
                mask: mask.clone(),
                style_source: src,
                eta,
                mixed,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMoment {
    pub split: String,
    pub id: String,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitMoment {
    pub split: String,
    pub count: usize,
    pub mean_mu: f64,
    pub mean_sigma: f64,
    /// Standard errors of the two means.
    pub se_mu: f64,
    pub se_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryMoment {
    pub split: String,
    pub class: usize,
    pub pixels: usize,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MomentReport {
    pub images: Vec<ImageMoment>,
    pub splits: Vec<SplitMoment>,
    pub categories: Vec<CategoryMoment>,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Per-image, per-split and per-category moments. Category moments use the
/// masks when present.
pub fn moment_report(splits: &[(&str, &[Sample])], eps: f64) -> Result<MomentReport> {
    if splits.is_empty() {
        return Err(Error::Empty("moment report needs at least one split".into()));
    }
    let mut report = MomentReport::default();
    for &(name, samples) in splits {
        if samples.is_empty() {
            return Err(Error::Empty(format!("split `{name}` has no samples")));
        }
        let mut mus = Vec::with_capacity(samples.len());
        let mut sigmas = Vec::with_capacity(samples.len());
        // per class: (count, sum, sum of squares)
        let mut acc: Vec<(usize, f64, f64)> = Vec::new();
        for s in samples {
            let st = image_style(&s.image, eps)?;
            mus.push(st.mu);
            sigmas.push(st.sigma);
            report.images.push(ImageMoment {
                split: name.to_string(),
                id: s.id.clone(),
                mu: st.mu,
                sigma: st.sigma,
            });
            if let Some(m) = &s.mask {
                if m.data().len() != s.image.len() {
                    return Err(Error::shape("moment_report", s.image.shape(), &[m.height(), m.width()]));
                }
                for (&l, &v) in m.data().iter().zip(s.image.data()) {
                    let l = l as usize;
                    if acc.len() <= l {
                        acc.resize(l + 1, (0, 0.0, 0.0));
                    }
                    acc[l].0 += 1;
                    acc[l].1 += v;
                    acc[l].2 += v * v;
                }
            }
        }
        let (mean_mu, se_mu) = mean_se(&mus);
        let (mean_sigma, se_sigma) = mean_se(&sigmas);
        report.splits.push(SplitMoment {
            split: name.to_string(),
            count: samples.len(),
            mean_mu,
            mean_sigma,
            se_mu,
            se_sigma,
        });
        for (class, &(n, s, s2)) in acc.iter().enumerate().filter(|(_, a)| a.0 > 0) {
            let mu = s / n as f64;
            let var = (s2 / n as f64 - mu * mu).max(0.0);
            report.categories.push(CategoryMoment {
                split: name.to_string(),
                class,
                pixels: n,
                mu,
                sigma: (var + eps).sqrt(),
            });
        }
    }
    Ok(report)
}

impl MomentReport {
    pub fn split(&self, name: &str) -> Option<&SplitMoment> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn category(&self, split: &str, class: usize) -> Option<&CategoryMoment> {
        self.categories.iter().find(|c| c.split == split && c.class == class)
    }

    /// Long-format CSV: `section,split,key,count,mu,sigma,se_mu,se_sigma`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,split,key,count,mu,sigma,se_mu,se_sigma\n");
        for s in &self.splits {
            let _ = writeln!(
                out,
                "split,{},all,{},{},{},{},{}",
                s.split, s.count, s.mean_mu, s.mean_sigma, s.se_mu, s.se_sigma
            );
        }
        for c in &self.categories {
            let _ = writeln!(out, "category,{},{},{},{},{},,", c.split, c.class, c.pixels, c.mu, c.sigma);
        }
        for i in &self.images {
            let _ = writeln!(out, "image,{},{},1,{},{},,", i.split, i.id, i.mu, i.sigma);
        }
        out
    }
}
