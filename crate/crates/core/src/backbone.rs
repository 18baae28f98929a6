//! Small configurable convolution stack producing stride-4 feature maps
//! from an image; the desk-scale stand-in for a heavy pretrained
//! backbone.

use crate::tensor::{Element, Gradients, Parameter, Result, Tape, Tensor, TensorError, Var};

/// One conv layer: 3x3 kernel, zero padding 1, configurable stride,
/// ReLU after the bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<E: Element> {
    pub weight: Parameter<E>, // [3,3,Cin,Cout]
    pub bias: Parameter<E>,   // [Cout]
    pub stride: usize,
}

impl<E: Element> ConvLayer<E> {
    pub fn new<R: rand::Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        // fan_in = 9 * c_in for a 3x3 kernel
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        ConvLayer {
            weight: Parameter::new(Tensor::uniform(vec![3, 3, c_in, c_out], -bound, bound, rng)),
            bias: Parameter::zeros(vec![c_out]),
            stride,
        }
    }
}

/// Two stride-2 conv layers by default, shrinking the image to the
/// detection grid.
#[derive(Clone, Debug)]
pub struct Backbone<E: Element> {
    pub layers: Vec<ConvLayer<E>>,
}

impl<E: Element> Backbone<E> {
    pub fn new<R: rand::Rng>(c_in: usize, channels: usize, rng: &mut R) -> Self {
        Backbone {
            layers: vec![
                ConvLayer::new(c_in, channels, 2, rng),
                ConvLayer::new(channels, channels, 2, rng),
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weight.value.shape()[3])
            .unwrap_or(0)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BackboneVars {
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.value.clone()),
                        tape.leaf(l.bias.value.clone()),
                        l.stride,
                    )
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &BackboneVars) {
        for (layer, (w, b, _)) in self.layers.iter_mut().zip(&vars.layers) {
            grads.accumulate(*w, &mut layer.weight);
            grads.accumulate(*b, &mut layer.bias);
        }
    }
}

#[derive(Clone)]
pub struct BackboneVars {
    layers: Vec<(Var, Var, usize)>,
}

/// Runs the stack on an `[H,W,Cin]` image, returning the feature map.
pub fn backbone_forward<E: Element>(
    tape: &mut Tape<E>,
    image: Var,
    vars: &BackboneVars,
) -> Result<Var> {
    if vars.layers.is_empty() {
        return Err(TensorError::Invalid {
            op: "backbone_forward",
            msg: "no layers".to_string(),
        });
    }
    let mut cur = image;
    for &(w, b, stride) in &vars.layers {
        let conv = tape.conv2d(cur, w, Some(b), stride, 1)?;
        cur = tape.relu(conv)?;
    }
    Ok(cur)
}
