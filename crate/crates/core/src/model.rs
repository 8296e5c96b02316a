//! The tri-view model: three independent view encoders plus a fusion stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{best_view, fuse_feature_map, fuse_mean, fuse_mlp, FusionStrategy, MlpParams, TriameseMlpConfig};
use crate::nn::{bind, MapFn};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::{purpose, stream};
use crate::vit::{forward_view, AttentionRecord, ForwardMode, PatchGrid, ViTConfig, ViTParams};
use crate::volume::{normalize, reslice, ViewAxis, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub volume_dims: [usize; 3],
    /// Z-score every input volume inside its mask before reslicing.
    #[serde(default = "enabled")]
    pub normalize_input: bool,
    pub vit: ViTConfig,
    pub fusion: FusionStrategy,
    pub fusion_mlp: TriameseMlpConfig,
}

fn enabled() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            volume_dims: crate::volume::PRODUCTION_DIMS,
            normalize_input: true,
            vit: ViTConfig::default(),
            fusion: FusionStrategy::Mlp,
            fusion_mlp: TriameseMlpConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            volume_dims: [28, 28, 28],
            normalize_input: true,
            vit: ViTConfig::desk(),
            fusion: FusionStrategy::Mlp,
            fusion_mlp: TriameseMlpConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_dims.contains(&0) {
            return Err(Error::Config(format!("volume dims {:?} must be >= 1", self.volume_dims)));
        }
        self.vit.validate()?;
        self.fusion_mlp.validate()
    }

    pub fn grids(&self) -> [PatchGrid; 3] {
        ViewAxis::ALL.map(|a| PatchGrid::new(a.view_dims(self.volume_dims), self.vit.patch_size))
    }

    /// Widths of the fusion MLP actually instantiated, if any.
    pub fn fusion_widths(&self) -> Option<Vec<usize>> {
        match self.fusion {
            FusionStrategy::Mlp => Some(self.fusion_mlp.widths.clone()),
            FusionStrategy::FeatureMap => Some(self.fusion_mlp.with_input(3 * self.vit.embed_dim)),
            FusionStrategy::Mean | FusionStrategy::Best => None,
        }
    }
}

/// Affine map between model units and years: `years = offset + scale * u`.
/// Fitted to the training ages so the regression targets are standardized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeScaler {
    pub offset: f64,
    pub scale: f64,
}

impl Default for AgeScaler {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AgeScaler {
    pub const IDENTITY: AgeScaler = AgeScaler {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn fit(ages: &[f64]) -> Self {
        if ages.is_empty() {
            return Self::IDENTITY;
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let std = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            offset: mean,
            scale: if std > 1e-6 { std } else { 1.0 },
        }
    }

    fn to_years<T: Scalar>(&self, tape: &mut Tape<T>, u: Var) -> Var {
        let scaled = tape.scale(u, T::lit(self.scale));
        tape.add_scalar(scaled, T::lit(self.offset))
    }

    fn to_units<T: Scalar>(&self, tape: &mut Tape<T>, years: Var) -> Var {
        let shifted = tape.add_scalar(years, T::lit(-self.offset));
        tape.scale(shifted, T::lit(1.0 / self.scale))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriameseParams<P> {
    pub views: [ViTParams<P>; 3],
    pub fusion: Option<MlpParams<P>>,
}

impl<P> TriameseParams<P> {
    pub fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> TriameseParams<Q> {
        let [x, y, z] = &self.views;
        TriameseParams {
            views: [x.map("view_x", f), y.map("view_y", f), z.map("view_z", f)],
            fusion: self.fusion.as_ref().map(|m| m.map("fusion", f)),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a P)) {
        for (axis, v) in ViewAxis::ALL.iter().zip(&self.views) {
            v.visit(&format!("view_{}", axis.name()), f);
        }
        if let Some(m) = &self.fusion {
            m.visit("fusion", f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&str, &'a mut P)) {
        for (axis, v) in ViewAxis::ALL.iter().zip(&mut self.views) {
            v.visit_mut(&format!("view_{}", axis.name()), f);
        }
        if let Some(m) = &mut self.fusion {
            m.visit_mut("fusion", f);
        }
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, p| out.push(p));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }
}

impl<T: Scalar> TriameseParams<Tensor<T>> {
    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, t| Tensor::zeros(t.shape().to_vec()))
    }
}

/// Per-view and fused predictions in years.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub fused: f64,
    pub views: [f64; 3],
}

/// Graph handles from one forward pass.
#[derive(Debug)]
pub struct TriameseForward {
    /// `1 × 1` per-view predictions in years.
    pub views: [Var; 3],
    /// `1 × 1` fused prediction in years, for jointly trained strategies.
    pub fused: Option<Var>,
    pub attention: [Vec<AttentionRecord>; 3],
    pub grids: [PatchGrid; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriameseModel<T = f32> {
    pub config: ModelConfig,
    pub params: TriameseParams<Tensor<T>>,
    pub scaler: AgeScaler,
    /// Per-view validation MAE, needed by best-view fusion.
    pub view_val_mae: Option<[f64; 3]>,
}

impl<T: Scalar> TriameseModel<T> {
    /// Fresh parameters drawn from the stream for `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grids = config.grids();
        let mut rng = stream(seed, &[purpose::INIT]);
        let views = grids.map(|g| ViTParams::init(&config.vit, g, &mut rng));
        let fusion = config
            .fusion_widths()
            .map(|w| MlpParams::init(&w, config.fusion_mlp.relu_before_readout, &mut rng));
        Ok(Self {
            config,
            params: TriameseParams { views, fusion },
            scaler: AgeScaler::IDENTITY,
            view_val_mae: None,
        })
    }

    pub fn with_scaler(mut self, scaler: AgeScaler) -> Self {
        self.scaler = scaler;
        self
    }

    pub fn cast<U: Scalar>(&self) -> TriameseModel<U> {
        TriameseModel {
            config: self.config.clone(),
            params: self.params.map(&mut |_, t| t.cast()),
            scaler: self.scaler,
            view_val_mae: self.view_val_mae,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TriameseParams<Var> {
        self.params.map(&mut bind(tape))
    }

    /// Records the full forward pass for `volume` on `tape`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &TriameseParams<Var>,
        volume: &Volume,
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<TriameseForward> {
        if volume.dims() != self.config.volume_dims {
            return Err(Error::dim("model input", &volume.dims(), &self.config.volume_dims));
        }
        let normalized;
        let volume = if self.config.normalize_input {
            normalized = normalize(volume)?;
            &normalized
        } else {
            volume
        };
        let views = reslice(volume);
        let mut preds = Vec::with_capacity(3);
        let mut tokens = Vec::with_capacity(3);
        let mut attention: [Vec<AttentionRecord>; 3] = Default::default();
        let mut grids = self.config.grids();
        for (i, view) in views.iter().enumerate() {
            let out = forward_view(tape, view, &bound.views[i], &self.config.vit, mode, rng)?;
            preds.push(self.scaler.to_years(tape, out.prediction));
            tokens.push(out.class_token);
            attention[i] = out.attention;
            grids[i] = out.grid;
        }
        let views: [Var; 3] = preds.try_into().expect("three views");
        let tokens: [Var; 3] = tokens.try_into().expect("three views");
        let fused = match (self.config.fusion, &bound.fusion) {
            (FusionStrategy::Mlp, Some(mlp)) => {
                let units = views.map(|v| self.scaler.to_units(tape, v));
                let u = fuse_mlp(tape, units, mlp)?;
                Some(self.scaler.to_years(tape, u))
            }
            (FusionStrategy::FeatureMap, Some(mlp)) => {
                let u = fuse_feature_map(tape, tokens, mlp)?;
                Some(self.scaler.to_years(tape, u))
            }
            (FusionStrategy::Mlp | FusionStrategy::FeatureMap, None) => {
                return Err(Error::Contract(format!(
                    "fusion `{}` needs fusion MLP parameters",
                    self.config.fusion.name()
                )))
            }
            _ => None,
        };
        Ok(TriameseForward {
            views,
            fused,
            attention,
            grids,
        })
    }

    /// Combines per-view predictions for the non-learned strategies, or
    /// passes the learned fused value through.
    pub fn combine(&self, views: [f64; 3], fused: Option<f64>) -> Result<f64> {
        match self.config.fusion {
            FusionStrategy::Mlp | FusionStrategy::FeatureMap => {
                fused.ok_or_else(|| Error::Contract("missing fused output".into()))
            }
            FusionStrategy::Mean => Ok(fuse_mean(views)),
            FusionStrategy::Best => Ok(views[best_view(self.view_val_mae)?.position()]),
        }
    }

    /// Eval-mode prediction.
    pub fn predict(&self, volume: &Volume) -> Result<Prediction> {
        let (pred, _) = self.predict_inner(volume, ForwardMode::EVAL)?;
        Ok(pred)
    }

    /// Eval-mode prediction that also returns attention matrices per view.
    pub fn predict_with_attention(
        &self,
        volume: &Volume,
    ) -> Result<(Prediction, [Vec<AttentionRecord>; 3])> {
        self.predict_inner(volume, ForwardMode::EXPLAIN)
    }

    /// Per-view predictions only; valid before best-view selection exists.
    pub fn predict_views(&self, volume: &Volume) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut rng = stream(0, &[]);
        let out = self.forward(&mut tape, &bound, volume, ForwardMode::EVAL, &mut rng)?;
        Ok(out.views.map(|v| tape.value(v).data()[0].as_f64()))
    }

    fn predict_inner(
        &self,
        volume: &Volume,
        mode: ForwardMode,
    ) -> Result<(Prediction, [Vec<AttentionRecord>; 3])> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        // eval mode never draws from this
        let mut rng = stream(0, &[]);
        let out = self.forward(&mut tape, &bound, volume, mode, &mut rng)?;
        let views = out.views.map(|v| tape.value(v).data()[0].as_f64());
        let fused = out.fused.map(|v| tape.value(v).data()[0].as_f64());
        let fused = self.combine(views, fused)?;
        Ok((Prediction { fused, views }, out.attention))
    }
}

/// Anything that maps a volume to an age in years.
pub trait AgePredictor: Sync {
    fn predict_age(&self, volume: &Volume) -> Result<f64>;

    /// The volume as the predictor sees it after its own preprocessing.
    /// Perturbations such as occlusion are applied in this space.
    fn input_space(&self, volume: &Volume) -> Result<Volume> {
        Ok(volume.clone())
    }
}

impl<T: Scalar> AgePredictor for TriameseModel<T> {
    fn predict_age(&self, volume: &Volume) -> Result<f64> {
        Ok(self.predict(volume)?.fused)
    }

    fn input_space(&self, volume: &Volume) -> Result<Volume> {
        if self.config.normalize_input {
            normalize(volume)
        } else {
            Ok(volume.clone())
        }
    }
}
