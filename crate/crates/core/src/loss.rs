//! Training objective and evaluation metrics.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::deform::{integrate, DisplacementField, FoldingStats, IntegrationConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// How the flow head output is turned into a displacement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    /// The raw field is the displacement `u`.
    #[default]
    Displacement,
    /// The raw field is a stationary velocity integrated by scaling and squaring.
    Diffeomorphic,
}

pub const DEFAULT_LAMBDA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub integration_steps: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            integration_steps: crate::deform::DEFAULT_STEPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        self.integration().validate()
    }

    pub fn integration(&self) -> IntegrationConfig {
        IntegrationConfig {
            steps: self.integration_steps,
        }
    }
}

/// Mean squared voxel difference.
pub fn similarity_loss<S: Scalar>(g: &mut Graph<S>, warped: Var, fixed: Var) -> Result<Var> {
    if g.shape(warped) != g.shape(fixed) {
        return Err(Error::shape("similarity_loss", g.shape(warped), g.shape(fixed)));
    }
    let d = g.sub(warped, fixed)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Mean over the three axes of the mean squared forward difference of `u`.
pub fn smoothness_loss<S: Scalar>(g: &mut Graph<S>, u: Var) -> Result<Var> {
    let s = g.shape(u).to_vec();
    if s.len() != 4 || s[1..].iter().any(|&n| n < 2) {
        return Err(Error::invalid("smoothness_loss", format!("expected [C, D, H, W] with extents >= 2, got {:?}", s)));
    }
    let mut total: Option<Var> = None;
    for axis in 1..4 {
        let n = s[axis];
        let hi = g.narrow(u, axis, 1, n - 1)?;
        let lo = g.narrow(u, axis, 0, n - 1)?;
        let d = g.sub(hi, lo)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(g.scale(total.expect("three axes"), S::from_f64(1.0 / 3.0)))
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub sim: Var,
    pub reg: Var,
    /// Displacement used for warping.
    pub displacement: Var,
    pub warped: Var,
}

/// `sim(warp(I_m, u), I_f) + λ·reg(u)`, with `u` the raw field or its integral.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    moving: Var,
    fixed: Var,
    raw_field: Var,
    cfg: &LossConfig,
    mode: RegistrationMode,
) -> Result<LossParts> {
    cfg.validate()?;
    let u = match mode {
        RegistrationMode::Displacement => raw_field,
        RegistrationMode::Diffeomorphic => integrate(g, raw_field, cfg.integration())?,
    };
    let warped = g.warp(moving, u)?;
    let sim = similarity_loss(g, warped, fixed)?;
    let reg = smoothness_loss(g, u)?;
    let weighted = g.scale(reg, S::from_f64(cfg.lambda));
    let loss = g.add(sim, weighted)?;
    Ok(LossParts {
        loss,
        sim,
        reg,
        displacement: u,
        warped,
    })
}

/// Integer label volume; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    extents: [usize; 3],
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        if extents.iter().product::<usize>() != labels.len() || extents.contains(&0) {
            return Err(Error::invalid(
                "label map",
                format!("{} labels for extents {:?}", labels.len(), extents),
            ));
        }
        Ok(Self { extents, labels })
    }

    /// Reads labels stored as reals; each value must be a non-negative integer.
    pub fn from_reals<S: Scalar>(extents: [usize; 3], values: &[S]) -> Result<Self> {
        let mut labels = Vec::with_capacity(values.len());
        for v in values {
            let f = v.as_f64();
            if !(f >= 0.0) || f != libm::floor(f) || f > u32::MAX as f64 {
                return Err(Error::invalid("label map", format!("label value {} is not a non-negative integer", f)));
            }
            labels.push(f as u32);
        }
        Self::new(extents, labels)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn to_reals<S: Scalar>(&self) -> Vec<S> {
        self.labels.iter().map(|&l| S::from_f64(l as f64)).collect()
    }

    /// Distinct foreground labels in ascending order.
    pub fn foreground(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiceReport {
    pub per_label: BTreeMap<u32, f64>,
    /// Mean over labels present in either map; `None` when there are none.
    pub mean: Option<f64>,
}

/// Per-label Dice `2|A∩B| / (|A|+|B|)`, background excluded.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: Option<&[u32]>) -> Result<DiceReport> {
    if a.extents != b.extents {
        return Err(Error::shape("dice", &a.extents, &b.extents));
    }
    let wanted: BTreeSet<u32> = match labels {
        Some(l) => l.iter().copied().filter(|&l| l != 0).collect(),
        None => a.foreground().union(&b.foreground()).copied().collect(),
    };
    let mut counts: BTreeMap<u32, (usize, usize, usize)> = wanted.iter().map(|&l| (l, (0, 0, 0))).collect();
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        if let Some(c) = counts.get_mut(&la) {
            c.0 += 1;
            if la == lb {
                c.2 += 1;
            }
        }
        if let Some(c) = counts.get_mut(&lb) {
            c.1 += 1;
        }
    }
    let mut report = DiceReport::default();
    for (l, (na, nb, both)) in counts {
        if na + nb > 0 {
            report.per_label.insert(l, 2.0 * both as f64 / (na + nb) as f64);
        }
    }
    if !report.per_label.is_empty() {
        report.mean = Some(report.per_label.values().sum::<f64>() / report.per_label.len() as f64);
    }
    Ok(report)
}

/// Nearest-neighbour label resampling at `p + u(p)`, clamped to the volume.
pub fn warp_labels<S: Scalar>(labels: &LabelMap, u: &DisplacementField<S>) -> Result<LabelMap> {
    if labels.extents != u.extents() {
        return Err(Error::shape("warp_labels", &labels.extents, &u.extents()));
    }
    let [d, h, w] = labels.extents;
    let vox = d * h * w;
    let f = u.tensor().data();
    let mut out = Vec::with_capacity(vox);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let near = |c: usize, p: usize, n: usize| {
                    let s = libm::round(p as f64 + f[c * vox + i].as_f64());
                    s.clamp(0.0, (n - 1) as f64) as usize
                };
                let (sz, sy, sx) = (near(0, z, d), near(1, y, h), near(2, x, w));
                out.push(labels.labels[(sz * h + sy) * w + sx]);
            }
        }
    }
    LabelMap::new(labels.extents, out)
}

/// Evaluation bundle emitted by `register` and `eval`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub dsc_mean: Option<f64>,
    pub dsc_per_label: BTreeMap<u32, f64>,
    pub folding_count: usize,
    pub folding_fraction: f64,
    pub det_min: f64,
    pub det_max: f64,
    pub det_mean: f64,
    pub loss: Option<f64>,
    pub loss_sim: Option<f64>,
    pub loss_reg: Option<f64>,
}

impl Metrics {
    pub fn new(folding: &FoldingStats, dice: Option<&DiceReport>) -> Self {
        Self {
            dsc_mean: dice.and_then(|d| d.mean),
            dsc_per_label: dice.map(|d| d.per_label.clone()).unwrap_or_default(),
            folding_count: folding.count,
            folding_fraction: folding.fraction,
            det_min: folding.det_min,
            det_max: folding.det_max,
            det_mean: folding.det_mean,
            loss: None,
            loss_sim: None,
            loss_reg: None,
        }
    }
}
