use super::attention::TransBlock;
use super::config::{derive_dims, AttentionScale, LevelDims, ModelConfig};
use super::encoder::ResConv;
use super::layers::{Conv, Linear};
use super::params::{init, Binding, ParamId, ParamStore};
use crate::error::{CtsError, Result};
use crate::tensor::{RngState, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub blocks: Vec<TransBlock>,
    /// Projection `d_i -> d_{i-1}`; absent at level 0.
    pub proj: Option<Linear>,
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, Class, H, W]` logits.
    pub logits: Var,
    /// Encoder feature maps, one per level.
    pub features: Vec<Var>,
    /// Attention weights `[N, h_i, P, P]` indexed by level then block.
    pub attention: Vec<Vec<Var>>,
    /// Decoder output tokens per level, after the level's blocks.
    pub tokens: Vec<Var>,
}

/// Residual CNN encoder feeding a fixed-token-count Transformer decoder.
#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar = f32> {
    config: ModelConfig,
    dims: LevelDims,
    pub store: ParamStore<T>,
    encoder: Vec<ResConv>,
    dsl: Vec<Option<Linear>>,
    pos: ParamId,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let dims = derive_dims(&config)?;
        let l = config.levels;
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();

        let mut encoder = Vec::with_capacity(l + 1);
        for lv in &dims.levels {
            let c_in = if lv.level == 0 { config.in_channels } else { lv.channels / 2 };
            let name = format!("encoder.level{}", lv.level);
            encoder.push(ResConv::new(&mut store, &name, c_in, lv.channels, config.skip_kernel, &mut rng));
        }

        let dsl = dims.levels[..l]
            .iter()
            .map(|lv| {
                lv.dsl_channels.map(|c| {
                    let name = format!("skips.level{}.dsl", lv.level);
                    Linear::new(&mut store, &name, lv.channels, c, &mut rng)
                })
            })
            .collect();

        let pos = {
            let t = init::normal::<T>(&[dims.tokens, dims.levels[l].token_dim], 0.02, &mut rng);
            store.add("bridge.pos", t.requiring_grad())
        };

        let mut decoder = Vec::with_capacity(l + 1);
        for lv in &dims.levels {
            let scale_dim = match config.attention_scale {
                AttentionScale::TokenDim => lv.token_dim,
                AttentionScale::HeadDim => dims.head_dim,
            };
            let mut blocks = Vec::with_capacity(config.blocks);
            for j in 0..config.blocks {
                let name = format!("decoder.level{}.block{}", lv.level, j);
                blocks.push(TransBlock::new(
                    &mut store,
                    &name,
                    lv.token_dim,
                    lv.heads,
                    scale_dim,
                    config.ffn_factor,
                    &mut rng,
                )?);
            }
            let proj = (lv.level > 0).then(|| {
                let name = format!("decoder.level{}.proj", lv.level);
                let d_out = dims.levels[lv.level - 1].token_dim;
                Linear::new(&mut store, &name, lv.token_dim, d_out, &mut rng)
            });
            decoder.push(DecoderLevel { blocks, proj });
        }

        let head = Conv::new(&mut store, "head", dims.head_channels, config.classes, 1, &mut rng);

        Ok(SegModel { config, dims, store, encoder, dsl, pos, decoder, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &LevelDims {
        &self.dims
    }

    pub fn encoder_blocks(&self) -> &[ResConv] {
        &self.encoder
    }

    pub fn dsl_linears(&self) -> &[Option<Linear>] {
        &self.dsl
    }

    pub fn pos_embedding(&self) -> ParamId {
        self.pos
    }

    pub fn decoder_levels(&self) -> &[DecoderLevel] {
        &self.decoder
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Same architecture with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            config: self.config.clone(),
            dims: self.dims.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            dsl: self.dsl.clone(),
            pos: self.pos,
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        self.store.bind(tape)
    }

    /// Encoder feature maps `X_i`, `i = 0..=l`, each taken before pooling.
    pub fn encode(&mut self, tape: &mut Tape<T>, b: &Binding, x: Var, training: bool) -> Result<Vec<Var>> {
        let s = tape.shape(x);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.height || s[3] != c.width {
            return Err(CtsError::config(format!(
                "input shape {:?} does not match configured [N, {}, {}, {}]",
                s, c.in_channels, c.height, c.width
            )));
        }
        let mut features = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h)?;
            }
            h = block.forward(tape, b, &mut self.store, h, training)?;
            features.push(h);
        }
        Ok(features)
    }

    /// Skip tokens `[N, P, d_i]` from encoder level `i < l`.
    pub fn skip_tokens(&self, tape: &mut Tape<T>, b: &Binding, feature: Var, level: usize) -> Result<Var> {
        let lv = &self.dims.levels[level];
        let h = match &self.dsl[level] {
            Some(dsl) => {
                let t = tape.permute(feature, &[0, 2, 3, 1])?;
                let t = dsl.forward(tape, b, t)?;
                tape.permute(t, &[0, 3, 1, 2])?
            }
            None => feature,
        };
        tape.patch_flatten(h, lv.patch_side)
    }

    /// Bridge tokens: level-`l` features flattened per position plus the
    /// positional embedding.
    pub fn bridge(&self, tape: &mut Tape<T>, b: &Binding, feature: Var) -> Result<Var> {
        let t = tape.patch_flatten(feature, 1)?;
        tape.add(t, b.var(self.pos))
    }

    /// Logits from level-0 decoder tokens.
    pub fn head_forward(&self, tape: &mut Tape<T>, b: &Binding, tokens: Var) -> Result<Var> {
        let c = &self.config;
        let side = 1usize << c.levels;
        let map = tape.patch_unflatten(tokens, self.dims.head_channels, c.height, c.width, side)?;
        self.head.forward(tape, b, map)
    }

    /// Decoder and head on precomputed encoder features.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        features: &[Var],
        training: bool,
        rng: &mut RngState,
    ) -> Result<ForwardOutput> {
        let l = self.config.levels;
        if features.len() != l + 1 {
            return Err(CtsError::config(format!(
                "decoder needs {} feature maps, got {}",
                l + 1,
                features.len()
            )));
        }
        let p = self.config.dropout;
        let mut attention = vec![Vec::new(); l + 1];
        let mut tokens = vec![None; l + 1];
        let mut carry: Option<Var> = None;
        for i in (0..=l).rev() {
            let mut x = match carry {
                None => self.bridge(tape, b, features[l])?,
                Some(prev) if self.config.use_skip_connections => {
                    let s = self.skip_tokens(tape, b, features[i], i)?;
                    tape.add(prev, s)?
                }
                Some(prev) => prev,
            };
            let s = tape.shape(x);
            assert_eq!(
                (s[1], s[2]),
                (self.dims.tokens, self.dims.levels[i].token_dim),
                "decoder level {} token layout",
                i
            );
            for block in &self.decoder[i].blocks {
                let (y, w) = block.forward(tape, b, x, p, training, rng)?;
                attention[i].push(w);
                x = y;
            }
            tokens[i] = Some(x);
            carry = match &self.decoder[i].proj {
                Some(proj) => Some(proj.forward(tape, b, x)?),
                None => Some(x),
            };
        }
        let logits = self.head_forward(tape, b, carry.unwrap())?;
        Ok(ForwardOutput {
            logits,
            features: features.to_vec(),
            attention,
            tokens: tokens.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        b: &Binding,
        x: Var,
        training: bool,
        rng: &mut RngState,
    ) -> Result<ForwardOutput> {
        let features = self.encode(tape, b, x, training)?;
        self.decode(tape, b, &features, training, rng)
    }

    /// Eval-mode logits for a batch `[N, C, H, W]`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = RngState::new(0);
        let out = self.forward(&mut tape, &b, xv, false, &mut rng)?;
        Ok(tape.take_value(out.logits))
    }

    /// Per-pixel argmax labels `[N, H, W]` of eval-mode logits.
    pub fn predict_labels(&mut self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = self.predict(x)?;
        Ok(argmax_channels(&logits))
    }
}

/// Argmax over the channel axis of `[N, C, H, W]`; first maximum wins.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0u8; n * hw];
    for i in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * hw + px] > d[(i * c + best) * hw + px] {
                    best = k;
                }
            }
            out[i * hw + px] = best as u8;
        }
    }
    out
}
