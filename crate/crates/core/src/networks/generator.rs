use serde::{Deserialize, Serialize};

use super::{ConvKind, ConvLayer, Initializer, ParamSet, INIT_STD, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that maps `(image, target structure)` to an image. The real
/// [`Generator`] implements it; loss tests plug in analytic stand-ins.
pub trait Translator {
    fn translate(&self, image: &Tensor, structure: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_res_blocks: usize,
    pub base_channels: usize,
    pub image_channels: usize,
    /// Structure channels concatenated after the image; 0 builds a generator
    /// that sees the image only.
    pub structure_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { num_res_blocks: 9, base_channels: 64, image_channels: 3, structure_channels: 3 }
    }
}

impl GeneratorConfig {
    pub fn input_channels(&self) -> usize {
        self.image_channels + self.structure_channels
    }

    pub fn output_channels(&self) -> usize {
        self.image_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_res_blocks < 1 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "generator base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if self.image_channels != 3 {
            return Err(Error::Config("generator works on 3-channel images".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

/// Residual encoder-decoder: 7×7 stem, two stride-2 downsampling convs,
/// residual blocks at quarter resolution, two stride-2 transposed convs and a
/// 7×7 projection to RGB followed by `tanh`. Instance normalisation and
/// reflection padding throughout.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    stem: ConvLayer,
    down: [ConvLayer; 2],
    blocks: Vec<ResBlock>,
    up: [ConvLayer; 2],
    head: ConvLayer,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Initializer::new(seed, INIT_STD);
        let ngf = config.base_channels;
        let fwd = ConvKind::Forward;
        let up_kind = ConvKind::Transpose { output_pad: 1 };
        let p = &mut params;
        let i = &mut init;
        let stem = ConvLayer::new(p, i, "stem", config.input_channels(), ngf, 7, 1, 0, fwd);
        let down = [
            ConvLayer::new(p, i, "down1", ngf, ngf * 2, 3, 2, 1, fwd),
            ConvLayer::new(p, i, "down2", ngf * 2, ngf * 4, 3, 2, 1, fwd),
        ];
        let blocks = (0..config.num_res_blocks)
            .map(|b| ResBlock {
                conv1: ConvLayer::new(p, i, &format!("res{b}.conv1"), ngf * 4, ngf * 4, 3, 1, 0, fwd),
                conv2: ConvLayer::new(p, i, &format!("res{b}.conv2"), ngf * 4, ngf * 4, 3, 1, 0, fwd),
            })
            .collect();
        let up = [
            ConvLayer::new(p, i, "up1", ngf * 4, ngf * 2, 3, 2, 1, up_kind),
            ConvLayer::new(p, i, "up2", ngf * 2, ngf, 3, 2, 1, up_kind),
        ];
        let head = ConvLayer::new(p, i, "head", ngf, config.output_channels(), 7, 1, 0, fwd);
        Ok(Self { config, params, stem, down, blocks, up, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Same network with parameters cut from the graph.
    pub fn frozen(&self) -> Generator {
        Generator { params: self.params.frozen(), ..self.clone() }
    }

    /// `G([image, structure])`; the structure is ignored when the generator
    /// was built without structure channels.
    pub fn forward(&self, image: &Tensor, structure: Option<&Tensor>) -> Result<Tensor> {
        let (n, c, h, w) = image.dims4()?;
        if c != self.config.image_channels {
            return Err(Error::Shape(format!(
                "generator expects {} image channels, got {c}",
                self.config.image_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w}: height and width must be multiples of 4"
            )));
        }
        let input = match (self.config.structure_channels, structure) {
            (0, _) => image.clone(),
            (sc, Some(s)) => {
                let (sn, scc, sh, sw) = s.dims4()?;
                if (sn, sh, sw) != (n, h, w) || scc != sc {
                    return Err(Error::Shape(format!(
                        "structure {:?} is not aligned with image {:?} ({sc} structure channels expected)",
                        s.shape(),
                        image.shape()
                    )));
                }
                Tensor::cat(&[image, s], 1)?
            }
            (sc, None) => {
                return Err(Error::Shape(format!("generator expects a {sc}-channel structure map")));
            }
        };
        let p = &self.params;
        let norm_relu = |t: Tensor| -> Result<Tensor> { Ok(t.instance_norm2d(NORM_EPS)?.relu()) };

        let mut t = norm_relu(self.stem.forward(p, &input.reflection_pad2d(3)?)?)?;
        for d in &self.down {
            t = norm_relu(d.forward(p, &t)?)?;
        }
        for b in &self.blocks {
            let r = norm_relu(b.conv1.forward(p, &t.reflection_pad2d(1)?)?)?;
            let r = b.conv2.forward(p, &r.reflection_pad2d(1)?)?.instance_norm2d(NORM_EPS)?;
            t = t.add(&r)?;
        }
        for u in &self.up {
            t = norm_relu(u.forward(p, &t)?)?;
        }
        Ok(self.head.forward(p, &t.reflection_pad2d(3)?)?.tanh())
    }
}

impl Translator for Generator {
    fn translate(&self, image: &Tensor, structure: &Tensor) -> Result<Tensor> {
        self.forward(image, Some(structure))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testing::{finite_diff, lcg_vec, max_rel_err};

    fn small() -> GeneratorConfig {
        GeneratorConfig { num_res_blocks: 2, base_channels: 8, ..Default::default() }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_vec(lcg_vec(shape.iter().product(), seed), shape).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let g = Generator::new(small(), 1).unwrap();
        let out = g.forward(&rand_t(&[1, 3, 64, 64], 2), Some(&rand_t(&[1, 3, 64, 64], 3))).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.data().iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let a = Generator::new(small(), 5).unwrap();
        let b = Generator::new(small(), 5).unwrap();
        let c = Generator::new(small(), 6).unwrap();
        for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
            assert_eq!(x.data(), y.data());
        }
        assert_ne!(a.params().get(0).data(), c.params().get(0).data());
    }

    #[test]
    fn shape_errors() {
        let g = Generator::new(small(), 1).unwrap();
        let img = rand_t(&[1, 3, 30, 32], 1);
        assert!(matches!(g.forward(&img, Some(&rand_t(&[1, 3, 30, 32], 2))), Err(Error::Shape(_))));
        let img = rand_t(&[1, 3, 32, 32], 1);
        assert!(matches!(g.forward(&img, Some(&rand_t(&[1, 3, 16, 32], 2))), Err(Error::Shape(_))));
        assert!(g.forward(&img, None).is_err());
        assert!(GeneratorConfig { base_channels: 4, ..small() }.validate().is_err());
        assert!(GeneratorConfig { num_res_blocks: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn batch_matches_individual_samples() {
        let g = Generator::new(small(), 9).unwrap();
        let img = rand_t(&[4, 3, 16, 16], 10);
        let st = rand_t(&[4, 3, 16, 16], 11);
        let batched = g.forward(&img, Some(&st)).unwrap();
        for i in 0..4 {
            let one = g.forward(&img.narrow(0, i, 1).unwrap(), Some(&st.narrow(0, i, 1).unwrap())).unwrap();
            let part = batched.narrow(0, i, 1).unwrap();
            assert!(max_rel_err(one.data(), part.data()) < 1e-5);
        }
    }

    #[test]
    fn input_gradient_is_finite_and_matches_fd() {
        let cfg = GeneratorConfig { num_res_blocks: 1, base_channels: 8, ..Default::default() };
        let g = Generator::new(cfg, 4).unwrap();
        let st = rand_t(&[1, 3, 8, 8], 12);
        let x0 = lcg_vec(3 * 64, 13);
        let x = Tensor::parameter(x0.clone(), &[1, 3, 8, 8]).unwrap();
        let f = |x: &Tensor| g.forward(x, Some(&st)).unwrap().sqr().mean();
        let grad = f(&x).backward().unwrap().get_or_zeros(&x);
        assert!(grad.iter().all(|v| v.is_finite()));
        let fd = finite_diff(&x0, &[1, 3, 8, 8], 1e-6, |t| f(t).item().unwrap());
        // ReLU kinks make this approximate; it guards against wiring errors.
        assert!(max_rel_err(&grad, &fd) < 1e-3, "{}", max_rel_err(&grad, &fd));
    }

    #[test]
    fn structure_free_generator_ignores_structure() {
        let cfg = GeneratorConfig { structure_channels: 0, ..small() };
        let g = Generator::new(cfg, 2).unwrap();
        let img = rand_t(&[1, 3, 16, 16], 3);
        let a = g.translate(&img, &rand_t(&[1, 3, 16, 16], 4)).unwrap();
        let b = g.forward(&img, None).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
