use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{BoundParams, ParamSet};
use crate::textkb::tokenize;

pub const UNK: &str = "<unk>";

/// Token vocabulary; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = tokens.into_iter().filter(|t| t != UNK).collect();
        all.sort();
        all.dedup();
        let mut list = vec![UNK.to_string()];
        list.extend(all);
        Self::from_list(list)
    }

    /// Vocabulary of every token in `texts`, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_tokens(texts.into_iter().flat_map(tokenize))
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub(crate) fn rebuild_index(self) -> Self {
        Self::from_list(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids for `text`; unknown tokens map to the `<unk>` id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw region feature width.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Shared semantic dimension of all projected embeddings.
    pub embed_dim: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

pub(crate) mod names {
    pub const IMG_W1: &str = "image.w1";
    pub const IMG_B1: &str = "image.b1";
    pub const IMG_W2: &str = "image.w2";
    pub const IMG_B2: &str = "image.b2";
    pub const IMG_PROJ_G: &str = "image.proj_global";
    pub const IMG_PROJ_L: &str = "image.proj_local";
    pub const TXT_EMBED: &str = "text.embed";
    pub const TXT_WQ: &str = "text.wq";
    pub const TXT_WK: &str = "text.wk";
    pub const TXT_WV: &str = "text.wv";
    pub const TXT_PROJ_G: &str = "text.proj_global";
    pub const TXT_PROJ_L: &str = "text.proj_local";
}

impl Model {
    /// Xavier-uniform weights, zero biases.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        use names::*;
        if vocab.len() != config.vocab_size {
            return Err(Error::Contract(format!(
                "vocabulary has {} tokens, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let (f, h, s) = (config.feature_dim, config.hidden_dim, config.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(IMG_W1, Tensor::xavier_uniform(f, h, &mut rng));
        p.insert(IMG_B1, Tensor::zeros(&[h]));
        p.insert(IMG_W2, Tensor::xavier_uniform(h, h, &mut rng));
        p.insert(IMG_B2, Tensor::zeros(&[h]));
        p.insert(IMG_PROJ_G, Tensor::xavier_uniform(h, s, &mut rng));
        p.insert(IMG_PROJ_L, Tensor::xavier_uniform(h, s, &mut rng));
        p.insert(
            TXT_EMBED,
            Tensor::xavier_uniform(config.vocab_size, h, &mut rng),
        );
        p.insert(TXT_WQ, Tensor::xavier_uniform(h, h, &mut rng));
        p.insert(TXT_WK, Tensor::xavier_uniform(h, h, &mut rng));
        p.insert(TXT_WV, Tensor::xavier_uniform(h, h, &mut rng));
        p.insert(TXT_PROJ_G, Tensor::xavier_uniform(h, s, &mut rng));
        p.insert(TXT_PROJ_L, Tensor::xavier_uniform(h, s, &mut rng));
        Ok(Self {
            config,
            vocab,
            params: p,
        })
    }

    /// Global image embedding `v` for raw region features, off the tape.
    pub fn embed_image(&self, regions: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let enc = encode_image(&mut g, &p, regions)?;
        Ok(g.value(enc.v).clone())
    }

    /// Global text embedding `t` for a sentence, off the tape.
    pub fn embed_text(&self, text: &str) -> Result<Tensor> {
        let ids = self.vocab.encode(text);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let enc = encode_text(&mut g, &p, &ids, self.config.vocab_size)?;
        Ok(g.value(enc.t).clone())
    }
}

/// Outputs of the image encoder for one sample.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    /// `[1 × D_S]`
    pub v: Var,
    /// `[N_I × D_S]`
    pub r: Var,
    pub z_global: Var,
    pub z_local: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    /// `[1 × D_S]`
    pub t: Var,
    /// `[N_L × D_S]`
    pub l: Var,
    pub z_global: Var,
    pub z_local: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub image: EncodedImage,
    pub text: EncodedText,
}

/// Per-region two-layer perceptron, mean-pooled global feature, and
/// distinct projectors for global and local embeddings.
pub fn encode_image(g: &mut Graph, p: &BoundParams, regions: &Tensor) -> Result<EncodedImage> {
    use names::*;
    if regions.rows() == 0 {
        return Err(Error::Contract("image needs at least one region".into()));
    }
    let x = g.constant(regions.clone());
    let pre = g.matmul(x, p.var(IMG_W1))?;
    let pre = g.add_row(pre, p.var(IMG_B1))?;
    let h = g.tanh(pre);
    let z_local = g.matmul(h, p.var(IMG_W2))?;
    let z_local = g.add_row(z_local, p.var(IMG_B2))?;
    let z_global = g.mean_rows(z_local)?;
    let v = g.matmul(z_global, p.var(IMG_PROJ_G))?;
    let v = g.l2_normalize(v);
    let r = g.matmul(z_local, p.var(IMG_PROJ_L))?;
    let r = g.l2_normalize(r);
    Ok(EncodedImage {
        v,
        r,
        z_global,
        z_local,
    })
}

/// Token lookup, one residual self-attention mixing layer with `tanh`,
/// mean-pooled global feature, and distinct projectors.
pub fn encode_text(
    g: &mut Graph,
    p: &BoundParams,
    ids: &[usize],
    vocab_size: usize,
) -> Result<EncodedText> {
    use names::*;
    if ids.is_empty() {
        return Err(Error::Contract("text needs at least one token".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of {vocab_size}"
        )));
    }
    let x = g.gather(p.var(TXT_EMBED), ids.to_vec())?;
    let hidden = g.value(x).cols() as f64;
    let q = g.matmul(x, p.var(TXT_WQ))?;
    let k = g.matmul(x, p.var(TXT_WK))?;
    let vals = g.matmul(x, p.var(TXT_WV))?;
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / hidden.sqrt());
    let weights = g.softmax_rows(scores, 1.0)?;
    let mixed = g.matmul(weights, vals)?;
    let resid = g.add(x, mixed)?;
    let z_local = g.tanh(resid);
    let z_global = g.mean_rows(z_local)?;
    let t = g.matmul(z_global, p.var(TXT_PROJ_G))?;
    let t = g.l2_normalize(t);
    let l = g.matmul(z_local, p.var(TXT_PROJ_L))?;
    let l = g.l2_normalize(l);
    Ok(EncodedText {
        t,
        l,
        z_global,
        z_local,
    })
}
