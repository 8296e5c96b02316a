//! Combining the three per-view outputs into one age estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, MapFn};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::volume::ViewAxis;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Pyramid MLP over the three view predictions, trained jointly.
    #[default]
    Mlp,
    /// Arithmetic mean of independently trained views.
    Mean,
    /// The view with the lowest validation MAE.
    Best,
    /// Pyramid MLP over the concatenated final class tokens.
    FeatureMap,
}

impl FusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Mlp => "mlp",
            FusionStrategy::Mean => "mean",
            FusionStrategy::Best => "best",
            FusionStrategy::FeatureMap => "feature_map",
        }
    }

    /// Whether training uses the fused output or each view on its own.
    pub fn trains_jointly(self) -> bool {
        matches!(self, FusionStrategy::Mlp | FusionStrategy::FeatureMap)
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(FusionStrategy::Mlp),
            "mean" => Ok(FusionStrategy::Mean),
            "best" => Ok(FusionStrategy::Best),
            "feature_map" => Ok(FusionStrategy::FeatureMap),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (expected mlp, mean, best or feature_map)"
            ))),
        }
    }
}

/// Widths of the fusion pyramid. Consecutive widths are joined by affine
/// layers with ReLU; a final affine readout maps the last width to a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriameseMlpConfig {
    pub widths: Vec<usize>,
    /// ReLU on the last pyramid layer too, right before the readout. Off by
    /// default, which generalizes better on the synthetic benchmark.
    pub relu_before_readout: bool,
}

impl Default for TriameseMlpConfig {
    fn default() -> Self {
        Self {
            widths: vec![3, 128, 256, 512, 1024, 512, 256, 128, 3],
            relu_before_readout: false,
        }
    }
}

impl TriameseMlpConfig {
    pub fn desk() -> Self {
        Self {
            widths: vec![3, 16, 32, 16, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.first() != Some(&3) {
            return Err(Error::Config(format!(
                "fusion widths must start at 3 (one per view), got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("fusion widths must be positive, got {:?}", self.widths)));
        }
        Ok(())
    }

    /// The same pyramid with its input widened to `input` features.
    pub fn with_input(&self, input: usize) -> Vec<usize> {
        let mut w = self.widths.clone();
        w[0] = input;
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub layers: Vec<Linear<P>>,
    pub readout: Linear<P>,
    pub relu_before_readout: bool,
}

impl<P> MlpParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> MlpParams<Q> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            readout: self.readout.map(&join(prefix, "readout"), f),
            relu_before_readout: self.relu_before_readout,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.readout.visit(&join(prefix, "readout"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.readout.visit_mut(&join(prefix, "readout"), f);
    }
}

impl<T: Scalar> MlpParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(widths: &[usize], relu_before_readout: bool, rng: &mut R) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::he(w[0], w[1], rng)).collect(),
            // starts at the offset, i.e. the mean training age
            readout: Linear::zeros(*widths.last().expect("non-empty widths"), 1),
            relu_before_readout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers
            .first()
            .unwrap_or(&self.readout)
            .in_features()
    }
}

impl MlpParams<Var> {
    /// `1 × k` input to `1 × 1` output.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last || self.relu_before_readout {
                h = tape.relu(h);
            }
        }
        self.readout.forward(tape, h)
    }
}

/// `P = MLP(P_x, P_y, P_z)` on `1 × 1` inputs.
pub fn fuse_mlp<T: Scalar>(tape: &mut Tape<T>, views: [Var; 3], params: &MlpParams<Var>) -> Result<Var> {
    for v in views {
        if tape.shape(v) != [1, 1] {
            return Err(Error::dim("fuse_mlp", tape.shape(v), &[1, 1]));
        }
    }
    let input = tape.concat(&views, 1)?;
    params.forward(tape, input)
}

/// Pyramid MLP over the concatenated `1 × D` class tokens.
pub fn fuse_feature_map<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: [Var; 3],
    params: &MlpParams<Var>,
) -> Result<Var> {
    let first = tape.shape(tokens[0]).to_vec();
    for t in &tokens[1..] {
        if tape.shape(*t) != first.as_slice() {
            return Err(Error::dim("fuse_feature_map", &first, tape.shape(*t)));
        }
    }
    let input = tape.concat(&tokens, 1)?;
    let expected = params
        .layers
        .first()
        .map(|l| tape.shape(l.weight)[0])
        .unwrap_or_else(|| tape.shape(params.readout.weight)[0]);
    if tape.shape(input)[1] != expected {
        return Err(Error::dim("fuse_feature_map", tape.shape(input), &[1, expected]));
    }
    params.forward(tape, input)
}

pub fn fuse_mean(preds: [f64; 3]) -> f64 {
    (preds[0] + preds[1] + preds[2]) / 3.0
}

/// Picks the view with the lowest validation MAE; ties go to the earlier
/// view in X, Y, Z order.
pub fn fuse_best(preds: [f64; 3], val_mae: Option<[f64; 3]>) -> Result<(ViewAxis, f64)> {
    let axis = best_view(val_mae)?;
    Ok((axis, preds[axis.position()]))
}

pub fn best_view(val_mae: Option<[f64; 3]>) -> Result<ViewAxis> {
    let maes = val_mae.ok_or_else(|| {
        Error::Contract("best-view fusion needs per-view validation MAE".into())
    })?;
    let mut best = 0;
    for i in 1..3 {
        if maes[i] < maes[best] {
            best = i;
        }
    }
    Ok(ViewAxis::ALL[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;
    use crate::rng::stream;

    #[test]
    fn mean_examples() {
        assert_eq!(fuse_mean([1.0, 2.0, 3.0]), 2.0);
        assert_eq!(fuse_mean([4.25, 4.25, 4.25]), 4.25);
    }

    #[test]
    fn best_view_examples() {
        assert_eq!(fuse_best([10.0, 20.0, 30.0], Some([4.42, 4.99, 5.29])).unwrap(), (ViewAxis::X, 10.0));
        assert_eq!(fuse_best([10.0, 20.0, 30.0], Some([1.0, 1.0, 1.0])).unwrap().0, ViewAxis::X);
        assert_eq!(fuse_best([10.0, 20.0, 30.0], Some([3.0, 2.0, 2.0])).unwrap().0, ViewAxis::Y);
        assert!(matches!(fuse_best([1.0; 3], None), Err(Error::Contract(_))));
    }

    #[test]
    fn single_usable_view_wins() {
        let (axis, p) = fuse_best([7.0, 0.0, 0.0], Some([2.0, f64::INFINITY, f64::INFINITY])).unwrap();
        assert_eq!((axis, p), (ViewAxis::X, 7.0));
    }

    #[test]
    fn zero_weights_give_zero() {
        let params = MlpParams::<Tensor<f64>>::init(&TriameseMlpConfig::desk().widths, true, &mut stream(1, &[]));
        let zeroed = params.map("", &mut |_, t: &Tensor<f64>| Tensor::zeros(t.shape().to_vec()));
        let mut tape = Tape::new();
        let bound = zeroed.map("", &mut bind(&mut tape));
        let views = [3.0, -40.0, 71.0].map(|v| tape.constant(Tensor::full([1, 1], v)));
        let out = fuse_mlp(&mut tape, views, &bound).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn feature_map_width_is_three_d() {
        let widths = TriameseMlpConfig::default().with_input(3 * 768);
        assert_eq!(widths[0], 2304);
        let params = MlpParams::<Tensor<f64>>::init(&[6, 4], true, &mut stream(1, &[]));
        assert_eq!(params.input_width(), 6);
        let mut tape = Tape::new();
        let bound = params.map("", &mut bind(&mut tape));
        let ok = [0.0, 1.0, 2.0].map(|v| tape.constant(Tensor::full([1, 2], v)));
        assert!(fuse_feature_map(&mut tape, ok, &bound).is_ok());
        let bad = [
            tape.constant(Tensor::zeros([1, 2])),
            tape.constant(Tensor::zeros([1, 3])),
            tape.constant(Tensor::zeros([1, 2])),
        ];
        assert!(fuse_feature_map(&mut tape, bad, &bound).is_err());
    }

    #[test]
    fn production_pyramid_has_eight_affine_layers_and_readout() {
        let cfg = TriameseMlpConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.widths.len(), 9);
        let params = MlpParams::<Tensor<f32>>::init(&cfg.widths, true, &mut stream(1, &[]));
        assert_eq!(params.layers.len(), 8);
        assert_eq!(params.readout.weight.shape(), &[3, 1]);
    }

    #[test]
    fn strategy_names_parse() {
        for s in [FusionStrategy::Mlp, FusionStrategy::Mean, FusionStrategy::Best, FusionStrategy::FeatureMap] {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("median".parse::<FusionStrategy>().is_err());
    }
}
