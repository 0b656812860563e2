use rand::Rng;

use super::layers::{param, BatchNorm, Conv, Embedding, Linear, Pass};
use super::{ModelError, ShapeTrace};
use crate::codec::IMAGE_SIDE;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Dimension of the generator's standard-normal latent input (one value per
/// entry of a 64×64 matrix).
pub const LATENT_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const EMBED_DIM: usize = 16;
/// Channels of the generator's 4×4 seed: one condition plane plus the latent.
pub const SEED_CHANNELS: usize = 128;
pub const LATENT_CHANNELS: usize = SEED_CHANNELS - 1;
pub const LEAKY_SLOPE: f64 = 0.2;

const GEN_CHANNELS: [usize; 5] = [128, 128, 64, 32, 1];
const DISC_CHANNELS: [usize; 5] = [2, 32, 64, 128, 128];

fn expect(
    g: &Graph,
    v: Var,
    stage: &'static str,
    expected: &[usize],
    trace: &mut ShapeTrace,
) -> Result<(), ModelError> {
    let got = g.shape(v);
    trace.push((stage, got.to_vec()));
    if got != expected {
        return Err(ModelError::ShapeContract {
            stage,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Generator {
    pub cond_embed: Embedding,
    pub cond_proj: Linear,
    pub latent_proj: Linear,
    pub up: Vec<Conv>,
    pub norms: Vec<BatchNorm>,
    pub out_bias: ParamId,
}

impl Generator {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab: usize, rng: &mut R) -> Self {
        let cond_embed = Embedding::new(store, "gen.cond_embed", vocab, EMBED_DIM, rng);
        let cond_proj = Linear::new(store, "gen.cond_proj", EMBED_DIM, 16, rng);
        let latent_proj = Linear::new(store, "gen.latent_proj", LATENT_DIM, LATENT_CHANNELS * 16, rng);
        let mut up = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in GEN_CHANNELS.windows(2).enumerate() {
            up.push(Conv::new(store, &format!("gen.up{i}"), w[0], w[1], true, rng));
            if i + 2 < GEN_CHANNELS.len() {
                norms.push(BatchNorm::new(store, &format!("gen.bn{i}"), w[1], rng));
            }
        }
        let out_bias = store.add("gen.out_bias", Tensor::zeros(&[1]));
        Generator {
            cond_embed,
            cond_proj,
            latent_proj,
            up,
            norms,
            out_bias,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cond_embed.table];
        ids.extend(self.cond_proj.params());
        ids.extend(self.latent_proj.params());
        ids.extend(self.up.iter().map(|c| c.weight));
        ids.extend(self.norms.iter().flat_map(|b| b.params()));
        ids.push(self.out_bias);
        ids
    }

    /// Maps `z: [N, LATENT_DIM]` and condition indices to `[N, 1, 64, 64]`
    /// images in `[0, 1]`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        z: Var,
        conds: &[usize],
        pass: Pass,
        trace: &mut ShapeTrace,
    ) -> Result<Var, ModelError> {
        let n = conds.len();
        let e = self.cond_embed.forward(g, conds, pass)?;
        let c = self.cond_proj.forward(g, e, pass)?;
        let c = g.reshape(c, &[n, 1, 4, 4])?;
        expect(g, c, "generator.condition", &[n, 1, 4, 4], trace)?;

        let l = self.latent_proj.forward(g, z, pass)?;
        let l = g.reshape(l, &[n, LATENT_CHANNELS, 4, 4])?;
        expect(g, l, "generator.latent", &[n, LATENT_CHANNELS, 4, 4], trace)?;

        let mut x = g.concat_channels(&[c, l])?;
        expect(g, x, "generator.seed", &[n, SEED_CHANNELS, 4, 4], trace)?;

        let blocks = self.up.len();
        for i in 0..blocks {
            x = self.up[i].forward(g, x, pass)?;
            if i + 1 < blocks {
                x = self.norms[i].forward(g, x, pass)?;
                x = g.relu(x)?;
            }
        }
        let b = param(g, self.out_bias, pass);
        x = g.channel_bias(x, b)?;
        x = g.tanh(x)?;
        // tanh range (-1, 1) onto pixel range [0, 1].
        x = g.affine(x, 0.5, 0.5)?;
        expect(g, x, "generator.output", &[n, 1, IMAGE_SIDE, IMAGE_SIDE], trace)?;
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Discriminator {
    pub cond_embed: Embedding,
    pub cond_proj: Linear,
    pub down: Vec<Conv>,
    pub in_bias: ParamId,
    pub norms: Vec<BatchNorm>,
    pub head: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab: usize, rng: &mut R) -> Self {
        let cond_embed = Embedding::new(store, "disc.cond_embed", vocab, EMBED_DIM, rng);
        let cond_proj = Linear::new(store, "disc.cond_proj", EMBED_DIM, IMAGE_SIDE * IMAGE_SIDE, rng);
        let mut down = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in DISC_CHANNELS.windows(2).enumerate() {
            down.push(Conv::new(store, &format!("disc.down{i}"), w[0], w[1], false, rng));
            if i > 0 {
                norms.push(BatchNorm::new(store, &format!("disc.bn{i}"), w[1], rng));
            }
        }
        let in_bias = store.add("disc.in_bias", Tensor::zeros(&[DISC_CHANNELS[1]]));
        let last = DISC_CHANNELS[DISC_CHANNELS.len() - 1];
        let head = Linear::new(store, "disc.head", last * 16, 1, rng);
        Discriminator {
            cond_embed,
            cond_proj,
            down,
            in_bias,
            norms,
            head,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cond_embed.table];
        ids.extend(self.cond_proj.params());
        ids.extend(self.down.iter().map(|c| c.weight));
        ids.push(self.in_bias);
        ids.extend(self.norms.iter().flat_map(|b| b.params()));
        ids.extend(self.head.params());
        ids
    }

    /// Scores `[N, 1, 64, 64]` images under their conditions; returns `[N, 1]`
    /// probabilities of being real.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: Var,
        conds: &[usize],
        pass: Pass,
        trace: &mut ShapeTrace,
    ) -> Result<Var, ModelError> {
        let n = conds.len();
        expect(g, images, "discriminator.image", &[n, 1, IMAGE_SIDE, IMAGE_SIDE], trace)?;
        let e = self.cond_embed.forward(g, conds, pass)?;
        let c = self.cond_proj.forward(g, e, pass)?;
        let c = g.reshape(c, &[n, 1, IMAGE_SIDE, IMAGE_SIDE])?;
        let mut x = g.concat_channels(&[images, c])?;
        expect(g, x, "discriminator.input", &[n, 2, IMAGE_SIDE, IMAGE_SIDE], trace)?;

        for i in 0..self.down.len() {
            x = self.down[i].forward(g, x, pass)?;
            if i == 0 {
                let b = param(g, self.in_bias, pass);
                x = g.channel_bias(x, b)?;
            } else {
                x = self.norms[i - 1].forward(g, x, pass)?;
            }
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let last = DISC_CHANNELS[DISC_CHANNELS.len() - 1];
        expect(g, x, "discriminator.features", &[n, last, 4, 4], trace)?;
        let x = g.reshape(x, &[n, last * 16])?;
        let x = self.head.forward(g, x, pass)?;
        let p = g.sigmoid(x)?;
        expect(g, p, "discriminator.output", &[n, 1], trace)?;
        Ok(p)
    }
}
