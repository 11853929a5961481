//! Segmentation metrics, scar-burden quantification under the fixed-thickness
//! wall model, and agreement statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{Volume, VolumeKind};

/// Assumed atrial wall thickness in millimetres.
pub const WALL_THICKNESS_MM: f64 = 2.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Voxelwise confusion counts of a predicted mask against ground truth.
pub fn confusion(pred: &Volume, gt: &Volume) -> Result<ConfusionCounts> {
    if pred.dims != gt.dims {
        return Err(Error::shape(
            "confusion mask dims",
            &[pred.dims.0, pred.dims.1, pred.dims.2],
            &[gt.dims.0, gt.dims.1, gt.dims.2],
        ));
    }
    for v in pred.values().iter().chain(gt.values()) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::invalid("confusion expects binary masks"));
        }
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (p, g) in pred.values().iter().zip(gt.values()) {
        match (*p == 1.0, *g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Accuracy, sensitivity, specificity and Dice. Ratios with a zero
/// denominator are reported as `None`, never silently as 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub ac: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub di: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> SegMetrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    SegMetrics {
        ac: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
        di: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScarBurden {
    pub scar_volume_mm3: f64,
    pub wall_volume_mm3: f64,
    pub percentage: f64,
}

/// Scar burden as a percentage of the wall volume, where the wall is modeled
/// as the exposed voxel-face surface of the anatomy extruded to the fixed
/// wall thickness. Face areas are weighted by the physical voxel spacing.
pub fn scar_burden(
    scar_mask: &Volume,
    anatomy_mask: &Volume,
    wall_thickness_mm: f64,
) -> Result<ScarBurden> {
    if scar_mask.dims != anatomy_mask.dims {
        return Err(Error::shape(
            "scar_burden mask dims",
            &[scar_mask.dims.0, scar_mask.dims.1, scar_mask.dims.2],
            &[anatomy_mask.dims.0, anatomy_mask.dims.1, anatomy_mask.dims.2],
        ));
    }
    if scar_mask.spacing_mm != anatomy_mask.spacing_mm {
        return Err(Error::invalid("scar_burden requires equal voxel spacing"));
    }
    if anatomy_mask.values().iter().all(|v| *v == 0.0) {
        return Err(Error::invalid(
            "scar_burden: empty anatomy mask, wall undefined",
        ));
    }
    let (nz, ny, nx) = anatomy_mask.dims;
    let (sz, sy, sx) = anatomy_mask.spacing_mm;
    let inside = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
            return false;
        }
        anatomy_mask.at(z as usize, y as usize, x as usize) == 1.0
    };
    let mut area = 0.0f64;
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !inside(z, y, x) {
                    continue;
                }
                if !inside(z - 1, y, x) {
                    area += sy * sx;
                }
                if !inside(z + 1, y, x) {
                    area += sy * sx;
                }
                if !inside(z, y - 1, x) {
                    area += sz * sx;
                }
                if !inside(z, y + 1, x) {
                    area += sz * sx;
                }
                if !inside(z, y, x - 1) {
                    area += sz * sy;
                }
                if !inside(z, y, x + 1) {
                    area += sz * sy;
                }
            }
        }
    }
    let scar_count = scar_mask.values().iter().filter(|v| **v == 1.0).count();
    let scar_volume = scar_count as f64 * scar_mask.voxel_volume_mm3();
    let wall_volume = area * wall_thickness_mm;
    Ok(ScarBurden {
        scar_volume_mm3: scar_volume,
        wall_volume_mm3: wall_volume,
        percentage: 100.0 * scar_volume / wall_volume,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("pearson lengths", &[xs.len()], &[ys.len()]));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson needs at least two samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson undefined for zero-variance series"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bland-Altman statistics of the differences ys - xs: mean difference and
/// limits of agreement at bias +/- 1.96 sample standard deviations.
pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Result<AgreementStats> {
    if xs.len() != ys.len() {
        return Err(Error::shape(
            "bland_altman lengths",
            &[xs.len()],
            &[ys.len()],
        ));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("bland_altman needs at least two samples"));
    }
    let d: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| y - x).collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - bias) * (v - bias)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    Ok(AgreementStats {
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

/// Mean and sample standard deviation of a series, skipping undefined values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub anatomy: SegMetrics,
    pub scar: SegMetrics,
    pub scar_burden_pct: f64,
    pub scar_burden_pct_gt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateBlock {
    pub anatomy_dice_mean: Option<f64>,
    pub anatomy_dice_sd: Option<f64>,
    pub scar_dice_mean: Option<f64>,
    pub scar_dice_sd: Option<f64>,
    pub scar_burden_pearson: Option<f64>,
    pub scar_burden_bland_altman: Option<AgreementStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeRecord>,
    pub aggregate: AggregateBlock,
}

impl MetricsReport {
    pub fn from_records(volumes: Vec<VolumeRecord>) -> MetricsReport {
        let dice_a: Vec<f64> = volumes.iter().filter_map(|v| v.anatomy.di).collect();
        let dice_s: Vec<f64> = volumes.iter().filter_map(|v| v.scar.di).collect();
        let gt: Vec<f64> = volumes.iter().map(|v| v.scar_burden_pct_gt).collect();
        let est: Vec<f64> = volumes.iter().map(|v| v.scar_burden_pct).collect();
        let (am, asd) = mean_sd(&dice_a);
        let (sm, ssd) = mean_sd(&dice_s);
        let aggregate = AggregateBlock {
            anatomy_dice_mean: if dice_a.is_empty() { None } else { Some(am) },
            anatomy_dice_sd: if dice_a.is_empty() { None } else { Some(asd) },
            scar_dice_mean: if dice_s.is_empty() { None } else { Some(sm) },
            scar_dice_sd: if dice_s.is_empty() { None } else { Some(ssd) },
            scar_burden_pearson: pearson(&gt, &est).ok(),
            scar_burden_bland_altman: bland_altman(&gt, &est).ok(),
        };
        MetricsReport { volumes, aggregate }
    }
}

/// Binarize a probability volume at a threshold; ties go to foreground.
pub fn binarize(prob: &Volume, threshold: f64) -> Volume {
    let values: Vec<f64> = prob
        .values()
        .iter()
        .map(|p| if *p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Volume::new(prob.dims, prob.spacing_mm, VolumeKind::Label, values)
        .expect("binarized labels are {0,1}")
}
