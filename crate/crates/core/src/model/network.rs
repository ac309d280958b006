//! Whole-network forward and backward passes.
//!
//! Every layer is: capsule reshape, capsule convolution, Leaky ReLU, squash.
//! Class scores are the norms of the final 1x1 capsules.

use crate::activation::{
    leaky_relu_backward_inplace, leaky_relu_inplace, squash_backward_inplace, squash_inplace,
    LEAKY_SLOPE,
};
use crate::conv::CapsConvLayer;
use crate::error::{Error, Result};
use crate::loss::{class_scores, class_scores_backward, margin_loss, predictions};
use crate::model::config::ModelConfig;
use crate::model::params::ParamBundle;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, FeatureMapShape};

/// Nonlinearity applied after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activations {
    /// Leaky ReLU followed by the capsule squash.
    #[default]
    Standard,
    /// No nonlinearity; the network is a linear map up to the readout.
    Identity,
}

/// A model configuration bound to kernel weights.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: ModelConfig,
    layers: Vec<CapsConvLayer<T>>,
    activations: Activations,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every convolution, already reshaped to its capsule.
    inputs: Vec<FeatureMap<T>>,
    /// Output of every Leaky ReLU (the squash input). Its sign equals the
    /// sign of the convolution output, which is all the Leaky ReLU backward
    /// needs.
    squash_inputs: Vec<FeatureMap<T>>,
    /// Shape of the caller's input before the first reshape.
    input_shape: FeatureMapShape,
    /// Final capsule map.
    pub output: FeatureMap<T>,
}

/// Gradients of a scalar loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub kernels: ParamBundle<T>,
    /// Gradient with respect to the network input, in the input's shape.
    pub input: FeatureMap<T>,
}

/// Loss, class scores and gradients for one labeled batch.
#[derive(Debug, Clone)]
pub struct LossAndGradients<T> {
    pub loss: T,
    /// `batch x classes`, row-major.
    pub scores: Vec<T>,
    pub gradients: Gradients<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, params: ParamBundle<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        let layers = config
            .layers
            .iter()
            .zip(params.kernels)
            .map(|(l, k)| CapsConvLayer::new(l.kernel_shape(), l.stride, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            config,
            layers,
            activations: Activations::Standard,
        })
    }

    pub fn with_activations(mut self, activations: Activations) -> Self {
        self.activations = activations;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[CapsConvLayer<T>] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    /// Copy of the current weights.
    pub fn params(&self) -> ParamBundle<T> {
        ParamBundle {
            kernels: self.layers.iter().map(|l| l.kernel().clone()).collect(),
        }
    }

    /// Mutable kernel storage per layer, in declaration order.
    pub fn kernels_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().map(|l| l.kernel_mut().data_mut())
    }

    pub fn set_params(&mut self, params: ParamBundle<T>) -> Result<()> {
        params.check(&self.config)?;
        for (layer, k) in self.layers.iter_mut().zip(params.kernels) {
            *layer.kernel_mut() = k;
        }
        Ok(())
    }

    fn check_input(&self, input: &FeatureMapShape) -> Result<()> {
        let want = self.config.input_shape.with_batch(input.batch);
        if *input != want || input.batch == 0 {
            return Err(Error::shape(format!(
                "network {} expects input {want}, got {input}",
                self.config.name
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<ForwardCache<T>> {
        self.check_input(input.shape())?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut squash_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let reshaped = x.reshape_capsules(layer.input_capsule())?;
            let mut z = layer.forward(&reshaped)?;
            inputs.push(reshaped);
            if self.activations == Activations::Standard {
                leaky_relu_inplace(z.data_mut(), slope);
                squash_inputs.push(z.clone());
                let cap = z.shape().capsule.len();
                squash_inplace(z.data_mut(), cap);
            }
            x = z;
        }
        Ok(ForwardCache {
            inputs,
            squash_inputs,
            input_shape: *input.shape(),
            output: x,
        })
    }

    /// Forward pass without caching, returning `batch x classes` scores.
    pub fn scores(&self, input: &FeatureMap<T>) -> Result<Vec<T>> {
        self.check_input(input.shape())?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = layer.forward(&x.reshape_capsules(layer.input_capsule())?)?;
            if self.activations == Activations::Standard {
                leaky_relu_inplace(z.data_mut(), slope);
                let cap = z.shape().capsule.len();
                squash_inplace(z.data_mut(), cap);
            }
            x = z;
        }
        class_scores(&x)
    }

    pub fn predict(&self, input: &FeatureMap<T>) -> Result<Vec<usize>> {
        Ok(predictions(&self.scores(input)?, self.classes()))
    }

    /// Back-propagates `upstream = dL/d(final capsule map)`.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: FeatureMap<T>) -> Result<Gradients<T>> {
        if upstream.shape() != cache.output.shape() {
            return Err(Error::shape(format!(
                "upstream {} does not match network output {}",
                upstream.shape(),
                cache.output.shape()
            )));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut kernels = Vec::with_capacity(self.layers.len());
        let mut grad = upstream;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            if self.activations == Activations::Standard {
                let s = &cache.squash_inputs[idx];
                let cap = s.shape().capsule.len();
                squash_backward_inplace(s.data(), grad.data_mut(), cap);
                leaky_relu_backward_inplace(s.data(), grad.data_mut(), slope);
            }
            let g = layer.backward(&cache.inputs[idx], &grad)?;
            kernels.push(g.wrt_kernel);
            let prev = if idx == 0 {
                cache.input_shape.capsule
            } else {
                self.layers[idx - 1].kernel_shape().output_capsule()
            };
            grad = g.wrt_input.reshape_capsules(prev)?;
        }
        kernels.reverse();
        Ok(Gradients {
            kernels: ParamBundle { kernels },
            input: grad,
        })
    }

    /// Mean margin loss over the batch and its gradients.
    pub fn loss_and_gradients(
        &self,
        input: &FeatureMap<T>,
        labels: &[usize],
    ) -> Result<LossAndGradients<T>> {
        if labels.len() != input.shape().batch {
            return Err(Error::shape(format!(
                "{} labels for batch {}",
                labels.len(),
                input.shape().batch
            )));
        }
        let cache = self.forward(input)?;
        let scores = class_scores(&cache.output)?;
        let (loss, score_grad) = margin_loss(&scores, self.classes(), labels, &self.config.loss)?;
        let upstream = class_scores_backward(&cache.output, &score_grad)?;
        let gradients = self.backward(&cache, upstream)?;
        Ok(LossAndGradients {
            loss,
            scores,
            gradients,
        })
    }

    /// Mean margin loss only.
    pub fn loss(&self, input: &FeatureMap<T>, labels: &[usize]) -> Result<T> {
        let scores = self.scores(input)?;
        Ok(margin_loss(&scores, self.classes(), labels, &self.config.loss)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::per_sample_margin_loss;
    use crate::model::params::msra_init;
    use crate::model::presets::preset;
    use crate::tensor::CapsuleShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: FeatureMapShape, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        FeatureMap::new(shape, data).unwrap()
    }

    fn toy(seed: u64) -> Network<f64> {
        let c = preset("toy").unwrap();
        let p = msra_init(&c, seed);
        Network::new(c, p).unwrap()
    }

    #[test]
    fn p2_zero_image_gives_equal_norms() {
        let c = preset("p2").unwrap();
        let net = Network::new(c.clone(), msra_init::<f64>(&c, 4)).unwrap();
        let x = FeatureMap::zeros(c.input_shape.with_batch(2));
        let scores = net.scores(&x).unwrap();
        assert!(scores.iter().all(|&s| s == scores[0]));
        let labels = [3, 7];
        let loss = net.loss(&x, &labels).unwrap();
        let expect: f64 =
            per_sample_margin_loss(&scores, 10, &labels, &c.loss).iter().sum::<f64>() / 2.0;
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn p1_spatial_chain_on_one_image() {
        let c = preset("p1").unwrap();
        let net = Network::new(c.clone(), msra_init::<f32>(&c, 0)).unwrap();
        let x = FeatureMap::filled(c.input_shape, 0.5f32);
        let cache = net.forward(&x).unwrap();
        let sides: Vec<_> = cache.inputs.iter().map(|m| m.shape().height).collect();
        assert_eq!(sides, [28, 13, 11, 5, 3]);
        assert_eq!(cache.output.shape().height, 1);
        assert_eq!(net.scores(&x).unwrap().len(), 10);
    }

    #[test]
    fn input_shape_checked() {
        let net = toy(0);
        let bad = FeatureMap::<f64>::zeros(
            FeatureMapShape::new(1, 1, 8, 7, CapsuleShape::SCALAR).unwrap(),
        );
        assert!(matches!(net.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let net = toy(11);
        let x = random_map(net.config().input_shape.with_batch(3), 2);
        let labels = [0, 2, 1];
        let out = net.loss_and_gradients(&x, &labels).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let base = net.params();
        for (li, k) in base.kernels.iter().enumerate() {
            for e in 0..k.len() {
                let mut plus = base.clone();
                plus.kernels[li].data_mut()[e] += h;
                let mut minus = base.clone();
                minus.kernels[li].data_mut()[e] -= h;
                let mut n = net.clone();
                n.set_params(plus).unwrap();
                let lp = n.loss(&x, &labels).unwrap();
                n.set_params(minus).unwrap();
                let lm = n.loss(&x, &labels).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let a = out.gradients.kernels.kernels[li].data()[e];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-5, "worst kernel rel err {worst}");

        let mut worst = 0.0f64;
        for e in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[e] += h;
            let mut xm = x.clone();
            xm.data_mut()[e] -= h;
            let fd = (net.loss(&xp, &labels).unwrap() - net.loss(&xm, &labels).unwrap()) / (2.0 * h);
            let a = out.gradients.input.data()[e];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
        }
        assert!(worst < 1e-5, "worst input rel err {worst}");
    }

    #[test]
    fn identity_network_is_linear() {
        let c = preset("p2").unwrap();
        let net = Network::new(c.clone(), msra_init::<f64>(&c, 5))
            .unwrap()
            .with_activations(Activations::Identity);
        let x = random_map(c.input_shape.with_batch(2), 8);
        let y = random_map(c.input_shape.with_batch(2), 9);
        let (a, b) = (1.7, -0.4);
        let mut combo = x.clone();
        for (o, &v) in combo.data_mut().iter_mut().zip(y.data()) {
            *o = a * *o + b * v;
        }
        let fx = net.forward(&x).unwrap().output;
        let fy = net.forward(&y).unwrap().output;
        let fc = net.forward(&combo).unwrap().output;
        let scale = fc.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ((c, x), y) in fc.data().iter().zip(fx.data()).zip(fy.data()) {
            assert!((c - (a * x + b * y)).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let net = toy(1);
        let x = random_map(net.config().input_shape.with_batch(2), 1);
        let cache = net.forward(&x).unwrap();
        let wrong = FeatureMap::zeros(cache.output.shape().with_batch(3));
        assert!(net.backward(&cache, wrong).is_err());
    }
}
