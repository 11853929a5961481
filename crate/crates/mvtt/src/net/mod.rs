//! The multiview two-task model: axial ConvLSTM sequence branch, two dilated
//! residual view branches, additive multiview fusion, a dilated attention
//! mask over the fused features, and two sigmoid segmentation heads trained
//! with a hybrid soft-Dice loss.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{he_uniform, xavier_uniform};
use crate::params::{Binding, ParamSet};
use crate::phantom::{MultiviewSlices, Volume, VolumeKind};
use crate::recurrent::{self, ConvLstmSpec, ConvLstmVars};
use crate::tensor::{BatchNormState, BnMode, ConvSpec, Tape, Tensor, Var};

pub const DICE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvttConfig {
    /// Channel count C at full width.
    pub base_channels: usize,
    /// Square kernel size of the non-dilated convolutions.
    pub kernel: usize,
    /// Ordered dilation rates of one hybrid-dilated block.
    pub hdc_rates: Vec<usize>,
    pub residual_blocks_per_branch: usize,
    /// Rational scaling of base_channels for desk-scale runs.
    pub width_multiplier: f64,
    /// Binarization cut; ties map to foreground.
    pub threshold: f64,
}

impl Default for MvttConfig {
    fn default() -> Self {
        MvttConfig {
            base_channels: 16,
            kernel: 3,
            hdc_rates: vec![1, 2, 5],
            residual_blocks_per_branch: 2,
            width_multiplier: 1.0,
            threshold: 0.5,
        }
    }
}

impl MvttConfig {
    pub fn desk_scale(channels: usize) -> Self {
        MvttConfig {
            width_multiplier: channels as f64 / 16.0,
            ..MvttConfig::default()
        }
    }

    /// Effective channel count after width scaling.
    pub fn channels(&self) -> usize {
        ((self.base_channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_multiplier <= 0.0 {
            return Err(Error::invalid("width_multiplier must be positive"));
        }
        if self.hdc_rates.is_empty() || self.hdc_rates.iter().any(|r| *r == 0) {
            return Err(Error::invalid("hdc_rates must be nonempty and positive"));
        }
        if self.hdc_rates.len() > 1 {
            let g = self.hdc_rates.iter().fold(0usize, |a, b| gcd(a, *b));
            if g > 1 {
                return Err(Error::invalid(
                    "hdc_rates share a common factor > 1 (gridding)",
                ));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0,1)"));
        }
        if self.residual_blocks_per_branch == 0 {
            return Err(Error::invalid("need at least one residual block"));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-voxel probability maps and binarized masks for anatomy and scar.
pub struct SegmentationPair {
    pub m_l: Volume,
    pub m_as: Volume,
    pub anatomy_mask: Volume,
    pub scar_mask: Volume,
}

/// The full model: config, named parameters and batch-norm running stats.
/// Peephole tensors are per-position, so a model instance is built for a
/// fixed volume geometry.
#[derive(Clone)]
pub struct MvttModel {
    pub config: MvttConfig,
    pub dims: (usize, usize, usize),
    pub params: ParamSet,
    pub bn: IndexMap<String, BatchNormState>,
}

impl MvttModel {
    pub fn new(config: MvttConfig, dims: (usize, usize, usize), seed: u64) -> Result<MvttModel> {
        config.validate()?;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::invalid("volume dims must be >= 1 per axis"));
        }
        let c = config.channels();
        let k = config.kernel;
        let (_nz, ny, nx) = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut bn = IndexMap::new();

        let conv_layer =
            |params: &mut ParamSet,
             bn: &mut IndexMap<String, BatchNormState>,
             name: &str,
             cin: usize,
             cout: usize,
             kernel: usize,
             with_bn: bool,
             sigmoid_out: bool,
             rng: &mut ChaCha8Rng| {
                let w = if sigmoid_out {
                    xavier_uniform(rng, &[cout, cin, kernel, kernel])
                } else {
                    he_uniform(rng, &[cout, cin, kernel, kernel])
                };
                params.insert(format!("{name}.weight"), w);
                params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
                if with_bn {
                    params.insert(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
                    params.insert(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
                    bn.insert(format!("{name}.bn"), BatchNormState::new(cout));
                }
            };

        // Axial encoder feeding the ConvLSTM.
        conv_layer(&mut params, &mut bn, "theta_a.enc1", 1, c, k, true, false, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_a.enc2", c, c, k, true, false, &mut rng);
        let lstm_spec = ConvLstmSpec {
            kernel: k,
            in_channels: c,
            hidden_channels: c,
            height: ny,
            width: nx,
        };
        recurrent::init_params(&mut params, "theta_a.lstm", &lstm_spec, &mut rng);

        // Dilated residual view branches.
        for prefix in ["theta_s", "theta_c"] {
            conv_layer(
                &mut params,
                &mut bn,
                &format!("{prefix}.stem"),
                1,
                c,
                k,
                true,
                false,
                &mut rng,
            );
            for b in 0..config.residual_blocks_per_branch {
                for (j, _) in config.hdc_rates.iter().enumerate() {
                    conv_layer(
                        &mut params,
                        &mut bn,
                        &format!("{prefix}.block{b}.conv{j}"),
                        c,
                        c,
                        k,
                        true,
                        false,
                        &mut rng,
                    );
                }
            }
        }

        // Attention mask branch over the raw axial slices.
        for (j, _) in config.hdc_rates.iter().enumerate() {
            let cin = if j == 0 { 1 } else { c };
            conv_layer(
                &mut params,
                &mut bn,
                &format!("theta_am.conv{j}"),
                cin,
                c,
                k,
                true,
                false,
                &mut rng,
            );
        }
        conv_layer(&mut params, &mut bn, "theta_am.proj", c, c, 1, false, true, &mut rng);

        // Segmentation heads.
        conv_layer(&mut params, &mut bn, "theta_l.conv1", c, c, k, true, false, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_l.conv2", c, c, k, true, false, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_l.final", 2 * c, 1, k, false, true, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_as.conv1", c, c, k, true, false, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_as.conv2", c, c, k, true, false, &mut rng);
        conv_layer(&mut params, &mut bn, "theta_as.final", 2 * c, 1, 1, false, true, &mut rng);

        Ok(MvttModel {
            config,
            dims,
            params,
            bn,
        })
    }

    fn lstm_spec(&self) -> ConvLstmSpec {
        ConvLstmSpec {
            kernel: self.config.kernel,
            in_channels: self.config.channels(),
            hidden_channels: self.config.channels(),
            height: self.dims.1,
            width: self.dims.2,
        }
    }

    /// One full forward pass over the three view stacks of a normalized
    /// volume. Train mode updates batch-norm running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        views: &MultiviewSlices,
        mode: BnMode,
    ) -> Result<ForwardPass> {
        let binding = Binding::bind(tape, &self.params);
        let (nz, ny, nx) = self.dims;
        if views.axial.len() != nz || views.sagittal.len() != nx || views.coronal.len() != ny {
            return Err(Error::invalid(format!(
                "view stacks {}x{}x{} do not match model dims {:?}",
                views.axial.len(),
                views.coronal.len(),
                views.sagittal.len(),
                self.dims
            )));
        }
        let rates = self.config.hdc_rates.clone();
        let blocks = self.config.residual_blocks_per_branch;
        let c = self.config.channels();
        let k = self.config.kernel;
        let lstm_spec = self.lstm_spec();
        let bn = &mut self.bn;

        let mut ctx = Ctx {
            tape,
            binding: &binding,
            bn,
            mode,
        };

        // Axial branch: per-slice encoder, then the slice-order recurrence.
        let axial = ctx.tape.constant(MultiviewSlices::batch(&views.axial));
        let e1 = ctx.conv_bn_relu("theta_a.enc1", axial, ConvSpec::same(k, 1, c, 1))?;
        let f_a_slices = ctx.conv_bn_relu("theta_a.enc2", e1, ConvSpec::same(k, c, c, 1))?;
        let lstm_vars = ConvLstmVars::bind(ctx.binding, "theta_a.lstm");
        let mut seq = Vec::with_capacity(nz);
        for z in 0..nz {
            seq.push(ctx.tape.slice_axis0(f_a_slices, z, 1)?);
        }
        let init = recurrent::zero_state(ctx.tape, &lstm_spec);
        let hs = recurrent::convlstm_run(ctx.tape, &seq, &lstm_vars, &lstm_spec, init)?;
        let stacked = ctx.tape.concat(0, &hs)?; // (Z, C, Y, X)
        let f_a = ctx.tape.permute(stacked, &[1, 0, 2, 3])?; // (C, Z, Y, X)

        // Orthogonal view branches.
        let sag = ctx.tape.constant(MultiviewSlices::batch(&views.sagittal));
        let f_s_view = ctx.view_branch("theta_s", sag, c, k, &rates, blocks)?; // (X, C, Y, Z)
        let f_s = ctx.tape.permute(f_s_view, &[1, 3, 2, 0])?; // (C, Z, Y, X)
        let cor = ctx.tape.constant(MultiviewSlices::batch(&views.coronal));
        let f_c_view = ctx.view_branch("theta_c", cor, c, k, &rates, blocks)?; // (Y, C, X, Z)
        let f_c = ctx.tape.permute(f_c_view, &[1, 3, 0, 2])?; // (C, Z, Y, X)

        // Multiview fusion.
        let tmp = ctx.tape.add(f_a, f_c)?;
        let f_v = ctx.tape.add(tmp, f_s)?;

        // Attention mask from the raw axial image.
        let mut m = axial;
        for (j, d) in rates.iter().enumerate() {
            let cin = if j == 0 { 1 } else { c };
            m = ctx.conv_bn_relu(&format!("theta_am.conv{j}"), m, ConvSpec::same(k, cin, c, *d))?;
        }
        let proj = ctx.conv("theta_am.proj", m, ConvSpec::same(1, c, c, 1))?;
        let am_slices = ctx.tape.sigmoid(proj); // (Z, C, Y, X)
        let am = ctx.tape.permute(am_slices, &[1, 0, 2, 3])?; // (C, Z, Y, X)
        let gain = ctx.tape.affine(am, 1.0, 1.0);
        let attended = ctx.tape.hadamard(gain, f_v)?;

        // Heads run 2D convs per axial slice.
        let m_l = ctx.head("theta_l", f_v, c, k, k)?;
        let m_as = ctx.head("theta_as", attended, c, k, 1)?;

        Ok(ForwardPass {
            binding,
            f_a,
            f_s,
            f_c,
            f_v,
            am,
            attended,
            m_l,
            m_as,
        })
    }

    /// Forward in eval mode, probability extraction and thresholding.
    /// The input volume must already be mean-normalized.
    pub fn infer(&mut self, volume: &Volume) -> Result<SegmentationPair> {
        if volume.dims != self.dims {
            return Err(Error::shape(
                "infer volume dims vs model dims",
                &[volume.dims.0, volume.dims.1, volume.dims.2],
                &[self.dims.0, self.dims.1, self.dims.2],
            ));
        }
        let views = crate::phantom::reslice(volume);
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &views, BnMode::Eval)?;
        let to_volume = |v: Var| -> Result<Volume> {
            let t = tape.value(v); // (Z, 1, Y, X)
            Volume::new(
                volume.dims,
                volume.spacing_mm,
                VolumeKind::Intensity,
                t.data().to_vec(),
            )
        };
        let m_l = to_volume(pass.m_l)?;
        let m_as = to_volume(pass.m_as)?;
        let anatomy_mask = crate::metrics::binarize(&m_l, self.config.threshold);
        let scar_mask = crate::metrics::binarize(&m_as, self.config.threshold);
        Ok(SegmentationPair {
            m_l,
            m_as,
            anatomy_mask,
            scar_mask,
        })
    }
}

/// Handles into one recorded forward pass.
pub struct ForwardPass {
    pub binding: Binding,
    pub f_a: Var,
    pub f_s: Var,
    pub f_c: Var,
    pub f_v: Var,
    pub am: Var,
    pub attended: Var,
    /// Anatomy probability map, (Z, 1, Y, X).
    pub m_l: Var,
    /// Scar probability map, (Z, 1, Y, X).
    pub m_as: Var,
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    binding: &'a Binding,
    bn: &'a mut IndexMap<String, BatchNormState>,
    mode: BnMode,
}

impl Ctx<'_> {
    fn conv(&mut self, name: &str, input: Var, spec: ConvSpec) -> Result<Var> {
        let w = self.binding.var(&format!("{name}.weight"));
        let b = self.binding.var(&format!("{name}.bias"));
        self.tape.conv2d(input, w, Some(b), spec)
    }

    fn conv_bn(&mut self, name: &str, input: Var, spec: ConvSpec) -> Result<Var> {
        let y = self.conv(name, input, spec)?;
        let gamma = self.binding.var(&format!("{name}.bn.gamma"));
        let beta = self.binding.var(&format!("{name}.bn.beta"));
        let state = self
            .bn
            .get_mut(&format!("{name}.bn"))
            .ok_or_else(|| Error::invalid(format!("missing bn state for {name}")))?;
        self.tape.batch_norm(y, gamma, beta, state, self.mode)
    }

    fn conv_bn_relu(&mut self, name: &str, input: Var, spec: ConvSpec) -> Result<Var> {
        let y = self.conv_bn(name, input, spec)?;
        Ok(self.tape.relu(y))
    }

    /// Stem conv then hybrid-dilated residual blocks, resolution preserved.
    fn view_branch(
        &mut self,
        prefix: &str,
        input: Var,
        c: usize,
        k: usize,
        rates: &[usize],
        blocks: usize,
    ) -> Result<Var> {
        let mut x = self.conv_bn_relu(&format!("{prefix}.stem"), input, ConvSpec::same(k, 1, c, 1))?;
        for b in 0..blocks {
            let mut t = x;
            for (j, d) in rates.iter().enumerate() {
                let name = format!("{prefix}.block{b}.conv{j}");
                t = self.conv_bn(&name, t, ConvSpec::same(k, c, c, *d))?;
                if j + 1 < rates.len() {
                    t = self.tape.relu(t);
                }
            }
            let sum = self.tape.add(t, x)?;
            x = self.tape.relu(sum);
        }
        Ok(x)
    }

    /// Two conv+BN+ReLU layers, channel concatenation, final conv + sigmoid.
    fn head(&mut self, prefix: &str, features: Var, c: usize, k: usize, final_k: usize) -> Result<Var> {
        let per_slice = self.tape.permute(features, &[1, 0, 2, 3])?; // (Z, C, Y, X)
        let h1 = self.conv_bn_relu(&format!("{prefix}.conv1"), per_slice, ConvSpec::same(k, c, c, 1))?;
        let h2 = self.conv_bn_relu(&format!("{prefix}.conv2"), h1, ConvSpec::same(k, c, c, 1))?;
        let cat = self.tape.concat(1, &[h1, h2])?;
        let logits = self.conv(
            &format!("{prefix}.final"),
            cat,
            ConvSpec::same(final_k, 2 * c, 1, 1),
        )?;
        Ok(self.tape.sigmoid(logits))
    }
}

/// Soft Dice loss 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps).
pub fn dice_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let ps = tape.value(pred).shape().to_vec();
    let ts = tape.value(truth).shape().to_vec();
    if ps != ts {
        return Err(Error::shape("dice_loss pred vs truth", &ps, &ts));
    }
    let pg = tape.hadamard(pred, truth)?;
    let pp = tape.hadamard(pred, pred)?;
    let gg = tape.hadamard(truth, truth)?;
    let s_pg = tape.sum(pg);
    let s_pp = tape.sum(pp);
    let s_gg = tape.sum(gg);
    let num = tape.affine(s_pg, 2.0, DICE_EPSILON);
    let den_sum = tape.add(s_pp, s_gg)?;
    let den = tape.affine(den_sum, 1.0, DICE_EPSILON);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Hybrid two-task loss: Dice(anatomy) + Dice(scar), in [0, 2].
pub fn hybrid_loss(tape: &mut Tape, m_l: Var, g_l: Var, m_as: Var, g_as: Var) -> Result<Var> {
    let d_l = dice_loss(tape, m_l, g_l)?;
    let d_as = dice_loss(tape, m_as, g_as)?;
    tape.add(d_l, d_as)
}

/// Multiview fusion from raw view-branch layouts: F_a is already axial
/// (C, Z, Y, X); the sagittal branch output is (X, C, Y, Z) and the coronal
/// one (Y, C, X, Z); both are transposed back to axial order and summed.
pub fn fuse(tape: &mut Tape, f_a: Var, f_s_view: Var, f_c_view: Var) -> Result<Var> {
    let f_s = tape.permute(f_s_view, &[1, 3, 2, 0])?;
    let f_c = tape.permute(f_c_view, &[1, 3, 0, 2])?;
    let shape_a = tape.value(f_a).shape().to_vec();
    if tape.value(f_s).shape() != shape_a || tape.value(f_c).shape() != shape_a {
        return Err(Error::shape(
            "fuse reoriented shapes",
            tape.value(f_s).shape(),
            &shape_a,
        ));
    }
    let t = tape.add(f_a, f_c)?;
    tape.add(t, f_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, normalize, reslice, PhantomSpec};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dice_loss_matches_a_hand_computed_value() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 0.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let loss = dice_loss(&mut tape, p, g).unwrap();
        let want = 1.0 - (2.0 + DICE_EPSILON) / (3.0 + DICE_EPSILON);
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn dice_loss_is_zero_for_perfect_and_one_for_disjoint() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[4], &[1.0, 0.0, 1.0, 0.0]));
        let same = dice_loss(&mut tape, a, a).unwrap();
        assert!(tape.value(same).data()[0].abs() < 1e-5);

        let b = tape.constant(t(&[4], &[0.0, 1.0, 0.0, 1.0]));
        let disjoint = dice_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(disjoint).data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn hybrid_loss_is_the_sum_of_both_terms() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 0.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let l1 = dice_loss(&mut tape, p, g).unwrap();
        let l = hybrid_loss(&mut tape, p, g, p, g).unwrap();
        let one = tape.value(l1).data()[0];
        assert_eq!(tape.value(l).data()[0], one + one);
    }

    #[test]
    fn fusion_with_zero_branches_is_the_identity_bitwise() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64).cos()).collect();
        // Axial layout (C, Z, Y, X) = (2, 3, 4, 5); view layouts permuted.
        let f_a = tape.constant(t(&[2, 3, 4, 5], &data));
        let f_s_view = tape.constant(Tensor::zeros(&[5, 2, 4, 3]));
        let f_c_view = tape.constant(Tensor::zeros(&[4, 2, 5, 3]));
        let fused = fuse(&mut tape, f_a, f_s_view, f_c_view).unwrap();
        assert_eq!(tape.value(fused).data(), tape.value(f_a).data());
    }

    #[test]
    fn fusion_is_additive_over_each_branch() {
        let mut tape = Tape::new();
        let n = 2 * 3 * 4 * 5;
        let mk = |tape: &mut Tape, shape: &[usize], k: f64| {
            let data: Vec<f64> = (0..n).map(|i| ((i as f64) * k).sin()).collect();
            tape.constant(t(shape, &data))
        };
        let f_a = mk(&mut tape, &[2, 3, 4, 5], 1.0);
        let f_s_view = mk(&mut tape, &[5, 2, 4, 3], 2.0);
        let f_c_view = mk(&mut tape, &[4, 2, 5, 3], 3.0);
        let fused = fuse(&mut tape, f_a, f_s_view, f_c_view).unwrap();

        let za = tape.constant(Tensor::zeros(&[2, 3, 4, 5]));
        let zs = tape.constant(Tensor::zeros(&[5, 2, 4, 3]));
        let zc = tape.constant(Tensor::zeros(&[4, 2, 5, 3]));
        let only_a = fuse(&mut tape, f_a, zs, zc).unwrap();
        let only_s = fuse(&mut tape, za, f_s_view, zc).unwrap();
        let only_c = fuse(&mut tape, za, zs, f_c_view).unwrap();
        let sum1 = tape.add(only_a, only_c).unwrap();
        let sum = tape.add(sum1, only_s).unwrap();
        assert_eq!(tape.value(fused).data(), tape.value(sum).data());
    }

    #[test]
    fn config_rejects_gridding_rates_and_bad_thresholds() {
        let mut c = MvttConfig::default();
        c.hdc_rates = vec![2, 4, 8];
        assert!(c.validate().is_err());
        let mut c = MvttConfig::default();
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        let c = MvttConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.channels(), 16);
        assert_eq!(MvttConfig::desk_scale(4).channels(), 4);
    }

    fn tiny_phantom() -> (PhantomSpec, crate::phantom::Phantom) {
        let mut spec = PhantomSpec::desk_scale(1);
        spec.dims = (3, 8, 8);
        spec.spacing_mm = (2.0, 1.0, 1.0);
        spec.semi_axes_mm = (2.5, 2.5, 2.5);
        spec.center_mm = (3.0, 4.0, 4.0);
        spec.pv_stub_count = 0;
        let p = generate_phantom(&spec).unwrap();
        (spec, p)
    }

    #[test]
    fn forward_produces_per_slice_probability_maps() {
        let (spec, p) = tiny_phantom();
        let mut model = MvttModel::new(MvttConfig::desk_scale(1), spec.dims, 0).unwrap();
        let views = reslice(&normalize(&p.intensity).unwrap());
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &views, BnMode::Train).unwrap();
        assert_eq!(tape.value(pass.m_l).shape(), &[3, 1, 8, 8]);
        assert_eq!(tape.value(pass.m_as).shape(), &[3, 1, 8, 8]);
        assert_eq!(tape.value(pass.f_v).shape(), &[1, 3, 8, 8]);
        for head in [pass.m_l, pass.m_as] {
            assert!(tape
                .value(head)
                .data()
                .iter()
                .all(|v| *v > 0.0 && *v < 1.0));
        }
        // The attention mask is strictly inside (0, 1).
        assert!(tape.value(pass.am).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        // Loss on this pass stays within the hybrid range.
        let g = tape.constant(
            Tensor::new(vec![3, 1, 8, 8], p.anatomy_gt.values().to_vec()).unwrap(),
        );
        let loss = hybrid_loss(&mut tape, pass.m_l, g, pass.m_as, g).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn infer_outputs_share_the_input_dims_and_are_reproducible() {
        let (spec, p) = tiny_phantom();
        let mut model = MvttModel::new(MvttConfig::desk_scale(1), spec.dims, 0).unwrap();
        let normalized = normalize(&p.intensity).unwrap();
        let a = model.infer(&normalized).unwrap();
        let b = model.infer(&normalized).unwrap();
        for v in [&a.m_l, &a.m_as, &a.anatomy_mask, &a.scar_mask] {
            assert_eq!(v.dims, spec.dims);
        }
        assert_eq!(a.m_l.values(), b.m_l.values());
        assert_eq!(a.scar_mask.values(), b.scar_mask.values());
    }

    #[test]
    fn infer_rejects_mismatched_dims() {
        let (spec, _) = tiny_phantom();
        let mut model = MvttModel::new(MvttConfig::desk_scale(1), spec.dims, 0).unwrap();
        let wrong = crate::phantom::Volume::zeros(
            (4, 8, 8),
            (2.0, 1.0, 1.0),
            crate::phantom::VolumeKind::Intensity,
        );
        assert!(model.infer(&wrong).is_err());
    }

    #[test]
    fn attention_bounds_hold_on_nonnegative_features() {
        // With F >= 0 elementwise, F <= (1+AM)F <= 2F.
        let mut tape = Tape::new();
        let f = tape.constant(t(&[4], &[0.0, 0.5, 1.0, 2.0]));
        let am_pre = tape.constant(t(&[4], &[-3.0, 0.0, 1.0, 8.0]));
        let am = tape.sigmoid(am_pre);
        let gain = tape.affine(am, 1.0, 1.0);
        let out = tape.hadamard(gain, f).unwrap();
        for ((o, fv), a) in tape
            .value(out)
            .data()
            .iter()
            .zip(tape.value(f).data())
            .zip(tape.value(am).data())
        {
            assert!(*o >= *fv && *o <= 2.0 * *fv);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }
}
