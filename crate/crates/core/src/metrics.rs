//! Dice similarity and average surface distance over class masks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `H x W` boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "binary_mask",
                msg: format!("{height}x{width} mask with {} values", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_labels(map: &LabelMap, class: u8) -> Self {
        Self {
            height: map.height(),
            width: map.width(),
            data: map.data().iter().map(|&l| l == class).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }

    /// Mask pixels with at least one 4-neighbour outside the mask; the image
    /// border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi)
                    && !(self.at(yi - 1, xi) && self.at(yi + 1, xi) && self.at(yi, xi - 1) && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("metric", &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// `2 |S n G| / (|S| + |G|)`; two empty masks score 1.
pub fn dsc(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    same_shape(s, g)?;
    let inter = s.data.iter().zip(&g.data).filter(|(a, b)| **a && **b).count();
    let total = s.count() + g.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// One-dimensional squared-distance transform (lower envelope of the
/// parabolas rooted at finite entries of `f`).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0;
    let mut started = false;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_transform(height: usize, width: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(y, x) in seeds {
        grid[y * width + x] = 0.0;
    }
    let n = height.max(width);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Sum of boundary-to-boundary distances from `s` to `g` and the number of
/// `s` boundary pixels, or `None` if either mask is empty.
fn surface_sum(s: &BinaryMask, g: &BinaryMask) -> Option<(f64, usize)> {
    if s.is_empty() || g.is_empty() {
        return None;
    }
    let bs = s.boundary();
    let dt = squared_distance_transform(g.height, g.width, &g.boundary());
    Some((bs.iter().map(|&(y, x)| dt[y * s.width + x].sqrt()).sum(), bs.len()))
}

/// Mean distance from each boundary pixel of `s` to the nearest boundary
/// pixel of `g`, in pixels. Not symmetric; `None` when either mask is empty.
pub fn asd(s: &BinaryMask, g: &BinaryMask) -> Result<Option<f64>> {
    same_shape(s, g)?;
    Ok(surface_sum(s, g).map(|(sum, n)| sum / n as f64))
}

/// Symmetric variant pooling both directions.
pub fn asd_symmetric(s: &BinaryMask, g: &BinaryMask) -> Result<Option<f64>> {
    same_shape(s, g)?;
    Ok(match (surface_sum(s, g), surface_sum(g, s)) {
        (Some((a, na)), Some((b, nb))) => Some((a + b) / (na + nb) as f64),
        _ => None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    /// Foreground classes `1..C`.
    pub dsc: Vec<f64>,
    pub asd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: usize,
    pub symmetric_asd: bool,
    pub cases: Vec<CaseMetrics>,
    pub class_dsc: Vec<f64>,
    pub class_asd: Vec<Option<f64>>,
    /// Cases per class where ASD was undefined.
    pub asd_missing: Vec<usize>,
    pub mean_dsc: f64,
    pub mean_asd: Option<f64>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = v.flatten().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores predictions against ground truth for foreground classes `1..C`.
pub fn evaluate_masks(
    ids: &[String],
    preds: &[LabelMap],
    truth: &[LabelMap],
    classes: usize,
    symmetric_asd: bool,
) -> Result<MetricReport> {
    if preds.len() != truth.len() || ids.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ids, {} predictions, {} ground-truth masks",
            ids.len(),
            preds.len(),
            truth.len()
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument("metrics need at least one foreground class".into()));
    }
    let fg = classes - 1;
    let mut cases = Vec::with_capacity(ids.len());
    for ((id, p), t) in ids.iter().zip(preds).zip(truth) {
        let mut case = CaseMetrics {
            id: id.clone(),
            dsc: Vec::with_capacity(fg),
            asd: Vec::with_capacity(fg),
        };
        for c in 1..classes as u8 {
            let (s, g) = (BinaryMask::from_labels(p, c), BinaryMask::from_labels(t, c));
            case.dsc.push(dsc(&s, &g)?);
            case.asd.push(if symmetric_asd { asd_symmetric(&s, &g)? } else { asd(&s, &g)? });
        }
        cases.push(case);
    }
    let n = cases.len().max(1) as f64;
    let class_dsc: Vec<f64> = (0..fg).map(|c| cases.iter().map(|k| k.dsc[c]).sum::<f64>() / n).collect();
    let class_asd: Vec<Option<f64>> = (0..fg).map(|c| mean_defined(cases.iter().map(|k| k.asd[c]))).collect();
    let asd_missing = (0..fg).map(|c| cases.iter().filter(|k| k.asd[c].is_none()).count()).collect();
    let mean_dsc = class_dsc.iter().sum::<f64>() / fg as f64;
    let mean_asd = mean_defined(class_asd.iter().copied());
    Ok(MetricReport {
        classes,
        symmetric_asd,
        cases,
        class_dsc,
        class_asd,
        asd_missing,
        mean_dsc,
        mean_asd,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// One row per case plus a final `mean` row; DSC in [0, 1], ASD in
    /// pixels, undefined ASD left blank.
    pub fn to_csv(&self) -> String {
        let fg = self.classes - 1;
        let mut out = String::from("id");
        for c in 1..=fg {
            let _ = write!(out, ",dsc_{c}");
        }
        for c in 1..=fg {
            let _ = write!(out, ",asd_{c}");
        }
        out.push_str(",mean_dsc,mean_asd\n");
        for k in &self.cases {
            out.push_str(&k.id);
            for d in &k.dsc {
                let _ = write!(out, ",{d}");
            }
            for a in &k.asd {
                let _ = write!(out, ",{}", opt(*a));
            }
            let mean = k.dsc.iter().sum::<f64>() / fg as f64;
            let _ = writeln!(out, ",{mean},{}", opt(mean_defined(k.asd.iter().copied())));
        }
        out.push_str("mean");
        for d in &self.class_dsc {
            let _ = write!(out, ",{d}");
        }
        for a in &self.class_asd {
            let _ = write!(out, ",{}", opt(*a));
        }
        let _ = writeln!(out, ",{},{}", self.mean_dsc, opt(self.mean_asd));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
