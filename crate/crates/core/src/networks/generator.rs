use serde::{Deserialize, Serialize};

use super::{pad_to_multiple, validate_params, Binder, Built, Mode, NormKind, ParamBuilder};
use crate::error::{Error, Result};
use crate::grid::{stack_images, unstack_images, ImageGrid};
use crate::nn::{Graph, ParamSet, Tensor, Var};

/// Encoder / residual / decoder generator layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub downsamplings: usize,
    pub residual_blocks: usize,
    pub norm: NormKind,
    /// Predict a correction in logit space on top of the input instead of
    /// the image itself.
    pub residual_head: bool,
    pub output: OutputActivation,
}

/// How head values are mapped into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    /// Hard clamp. Exact 0 and 1 are reachable, which matters for flat
    /// backgrounds under masked SSIM.
    Clamp,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            base_channels: 32,
            downsamplings: 2,
            residual_blocks: 4,
            norm: NormKind::Instance,
            residual_head: false,
            output: OutputActivation::Sigmoid,
        }
    }
}

/// Input intensities are kept this far from 0 and 1 before taking logits in
/// residual-head mode.
const LOGIT_MARGIN: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    template: ParamSet,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        if spec.base_channels == 0 {
            return Err(Error::InvalidConfig("generator needs base_channels >= 1".into()));
        }
        if spec.norm == NormKind::Batch {
            return Err(Error::InvalidConfig(
                "generator supports instance or no normalization".into(),
            ));
        }
        let template = Self::layout(&spec, 0);
        Ok(Generator { spec, template })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn layout(spec: &GeneratorSpec, seed: u64) -> ParamSet {
        let mut b = ParamBuilder::new("generator", seed);
        let base = spec.base_channels;
        b.conv("stem", 1, base, 3, spec.norm);
        let mut c = base;
        for i in 0..spec.downsamplings {
            b.conv(&format!("down{i}"), c, 2 * c, 3, spec.norm);
            c *= 2;
        }
        for i in 0..spec.residual_blocks {
            b.conv(&format!("res{i}.a"), c, c, 3, spec.norm);
            b.conv(&format!("res{i}.b"), c, c, 3, spec.norm);
        }
        for i in 0..spec.downsamplings {
            b.conv(&format!("up{i}"), c, c / 2, 3, spec.norm);
            c /= 2;
        }
        b.conv("head", c, 1, 3, NormKind::None);
        if spec.residual_head {
            // start close to the identity map
            b.scale_last_weight("head", 0.1);
        } else if spec.output == OutputActivation::Clamp {
            // a head that starts outside (0, 1) everywhere never gets a gradient
            b.scale_last_weight("head", 0.1);
            b.fill_last_bias("head", 0.5);
        }
        b.set
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        Self::layout(&self.spec, seed)
    }

    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        validate_params(&self.template, params)
    }

    /// Lays the generator onto `g`. `x` is `[N, 1, H, W]`; the output var has
    /// the same shape with values in `[0, 1]`.
    pub fn build(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        grad: bool,
        mode: Mode,
    ) -> Result<Built> {
        self.validate(params)?;
        if g.value(x).c() != 1 {
            return Err(Error::shape("1 input channel", g.value(x).c()));
        }
        let mut b = Binder::new(params, grad, mode);
        let norm = self.spec.norm;
        let (xp, h, w) = pad_to_multiple(g, x, 1 << self.spec.downsamplings);
        let mut y = b.conv_block(g, xp, "stem", 1, norm, true)?;
        for i in 0..self.spec.downsamplings {
            y = b.conv_block(g, y, &format!("down{i}"), 2, norm, true)?;
        }
        for i in 0..self.spec.residual_blocks {
            let a = b.conv_block(g, y, &format!("res{i}.a"), 1, norm, true)?;
            let r = b.conv_block(g, a, &format!("res{i}.b"), 1, norm, false)?;
            y = g.add(y, r);
        }
        for i in 0..self.spec.downsamplings {
            let u = g.upsample2(y);
            y = b.conv_block(g, u, &format!("up{i}"), 1, norm, true)?;
        }
        let mut logits = b.conv_block(g, y, "head", 1, NormKind::None, false)?;
        if (g.value(logits).h(), g.value(logits).w()) != (h, w) {
            logits = g.crop(logits, h, w);
        }
        let clamp = self.spec.output == OutputActivation::Clamp;
        if self.spec.residual_head {
            // sigmoid heads correct in logit space, clamp heads in intensity space
            let base = if clamp {
                g.value(x).clone()
            } else {
                g.value(x).map(|v| {
                    let v = v.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN);
                    (v / (1.0 - v)).ln()
                })
            };
            let base = g.input(base, false);
            logits = g.add(logits, base);
        }
        let out = if clamp {
            g.clamp(logits, 0.0, 1.0)
        } else {
            g.sigmoid(logits)
        };
        Ok(Built {
            out,
            buffer_updates: b.updates,
        })
    }

    /// Gradient-free forward over a batch tensor.
    pub fn forward_tensor(&self, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let built = self.build(&mut g, params, xv, false, mode)?;
        Ok(g.value(built.out).clone())
    }

    pub fn forward(&self, params: &ParamSet, images: &[ImageGrid], mode: Mode) -> Result<Vec<ImageGrid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack_images(images)?;
        unstack_images(&self.forward_tensor(params, &x, mode)?)
    }

    pub fn forward_one(&self, params: &ParamSet, image: &ImageGrid, mode: Mode) -> Result<ImageGrid> {
        let mut out = self.forward(params, std::slice::from_ref(image), mode)?;
        Ok(out.remove(0))
    }
}
