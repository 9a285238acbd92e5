//! Cross-modal fusion head and the assembled forecaster.
//!
//! The temporal tokens query the language-model output through multi-head
//! cross attention; a residual layer norm and a flattened affine map produce
//! the normalized forecast, which is mapped back to kW with the input
//! window's statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{llm_forward, llm_params, vision_encoder_params, encode_image_with, FrozenEncoderConfig};
use crate::dataio::SampleRecord;
use crate::error::{Error, Result};
use crate::layers::{apply_linear, apply_norm, attention_params, linear, multi_head_attention, norm, Named};
use crate::numerics::{Binder, Graph, ParamStore, Tensor, Var};
use crate::prompt::{compute_stats, embed_text_var, render_prompt, tokenize, PromptTemplate, SoftPrompt, SOFT_PROMPT};
use crate::temporal::{encode_temporal, normalize_window, patchify, temporal_params, PatchConfig, WindowNorm};
use crate::vision::{preprocess, ImageNormStats, VisionProjection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationConfig {
    pub use_tam: bool,
    pub use_pam: bool,
    pub use_vam: bool,
    pub use_soft_prompt: bool,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_tam || self.use_pam || self.use_vam {
            Ok(())
        } else {
            Err(Error::NoModality)
        }
    }

    /// Whether the language-model branch runs at all.
    pub fn uses_llm(&self) -> bool {
        self.use_pam || self.use_vam
    }

    pub fn uses_soft_prompt(&self) -> bool {
        self.uses_llm() && self.use_soft_prompt
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.config() == *self)
    }
}

/// The six model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Proposed,
    ProposedNoSoftPrompt,
    Tam,
    TamPam,
    TamVam,
    PamVam,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Proposed,
        Variant::ProposedNoSoftPrompt,
        Variant::Tam,
        Variant::TamPam,
        Variant::TamVam,
        Variant::PamVam,
    ];

    pub fn config(self) -> AblationConfig {
        let (use_tam, use_pam, use_vam, use_soft_prompt) = match self {
            Variant::Proposed => (true, true, true, true),
            Variant::ProposedNoSoftPrompt => (true, true, true, false),
            Variant::Tam => (true, false, false, false),
            Variant::TamPam => (true, true, false, true),
            Variant::TamVam => (true, false, true, false),
            Variant::PamVam => (false, true, true, true),
        };
        AblationConfig {
            use_tam,
            use_pam,
            use_vam,
            use_soft_prompt,
        }
    }

    /// Row label used in reports.
    pub fn table_name(self) -> &'static str {
        match self {
            Variant::Proposed => "Proposed",
            Variant::ProposedNoSoftPrompt => "Proposed-noSoftPrompt",
            Variant::Tam => "TAM",
            Variant::TamPam => "TAM-PAM",
            Variant::TamVam => "TAM-VAM",
            Variant::PamVam => "PAM-VAM",
        }
    }

    /// Spelling accepted on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::ProposedNoSoftPrompt => "proposed-no-soft-prompt",
            Variant::Tam => "tam-only",
            Variant::TamPam => "tam-pam",
            Variant::TamVam => "tam-vam",
            Variant::PamVam => "pam-vam",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.table_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.cli_name() == s || v.table_name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.cli_name()).collect();
                Error::InvalidArgument(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Shapes of the fusion head: projections into `d_model`, cross attention
/// with `heads` heads, the residual norm and the `(n_query * d_model) -> horizon`
/// output map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub d_llm: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_query: usize,
    pub horizon: usize,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(&self, with_temporal: bool, rng: &mut R) -> Named {
        let mut out = Named::new();
        linear(&mut out, "fus.llm", self.d_llm, self.d_model, rng);
        if with_temporal {
            linear(&mut out, "fus.tmp", self.d_model, self.d_model, rng);
        }
        attention_params(&mut out, "fus.attn", self.d_model, rng);
        norm(&mut out, "fus.ln", self.d_model);
        out
    }

    pub fn init_output<R: Rng + ?Sized>(&self, rng: &mut R) -> Named {
        let mut out = Named::new();
        linear(&mut out, "out", self.n_query * self.d_model, self.horizon, rng);
        out
    }
}

/// Affine maps of `E_LLM` and (if present) `E_temporal` into `d_model`.
pub fn project_modalities(
    g: &mut Graph,
    b: &mut Binder,
    e_llm: Var,
    e_temporal: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let l = apply_linear(g, b, "fus.llm", e_llm)?;
    let t = match e_temporal {
        Some(t) => Some(apply_linear(g, b, "fus.tmp", t)?),
        None => None,
    };
    Ok((l, t))
}

/// Multi-head attention with queries from `query_side` and keys/values from
/// `kv_side`. Returns the output and one weight matrix per head.
pub fn cross_modal_attention(
    g: &mut Graph,
    b: &mut Binder,
    query_side: Var,
    kv_side: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    if g.shape(query_side)[1] != g.shape(kv_side)[1] {
        return Err(Error::shape(
            "cross_modal_attention",
            format!("query {:?} vs kv {:?}", g.shape(query_side), g.shape(kv_side)),
        ));
    }
    multi_head_attention(g, b, "fus.attn", query_side, kv_side, heads)
}

/// `LayerNorm(e_temporal_proj + attn_out)`.
pub fn fuse(g: &mut Graph, b: &mut Binder, e_temporal_proj: Var, attn_out: Var) -> Result<Var> {
    let s = g.add(e_temporal_proj, attn_out)?;
    apply_norm(g, b, "fus.ln", s)
}

/// Row-major flatten followed by the output affine map.
pub fn output_projection(g: &mut Graph, b: &mut Binder, e_fusion: Var) -> Result<Var> {
    let w = b.var(g, "out.w")?;
    let rows = g.shape(w)[0];
    let n = g.value(e_fusion).len();
    if n != rows {
        return Err(Error::shape(
            "output_projection",
            format!("{:?} flattens to {n} values, output layer expects {rows}", g.shape(e_fusion)),
        ));
    }
    let flat = g.flatten(e_fusion)?;
    let bias = b.var(g, "out.b")?;
    let y = g.affine(flat, w, bias)?;
    let h = g.shape(y)[1];
    g.reshape(y, &[h])
}

/// Architecture and preprocessing settings of a forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub horizon: usize,
    pub patch: PatchConfig,
    pub vision: FrozenEncoderConfig,
    pub llm: FrozenEncoderConfig,
    /// Side of the square encoder input; frames are resized to it at ingest.
    pub image_size: usize,
    /// Side of the raw camera frames the model accepts.
    pub camera_size: usize,
    /// Camera frames per sample, oldest first, the last at the anchor. Their
    /// encodings are stacked on the feature axis, one token per image patch.
    pub frames: usize,
    /// Resampled steps between consecutive frames.
    pub frame_stride: usize,
    pub n_soft: usize,
    pub fusion_heads: usize,
    pub ablation: AblationConfig,
    pub template: PromptTemplate,
    pub image_stats: ImageNormStats,
}

impl ModelConfig {
    /// Defaults for a horizon of `horizon` steps with a `2 * horizon` input.
    pub fn new(horizon: usize) -> Self {
        let vision = FrozenEncoderConfig {
            seed: 0x5eed_0001,
            ..FrozenEncoderConfig::default()
        };
        let llm = FrozenEncoderConfig {
            seed: 0x5eed_0002,
            ..FrozenEncoderConfig::default()
        };
        Self {
            horizon,
            patch: PatchConfig::new(2 * horizon),
            vision,
            llm,
            image_size: 64,
            camera_size: 64,
            frames: 1,
            frame_stride: 1,
            n_soft: crate::prompt::DEFAULT_N_SOFT,
            fusion_heads: 4,
            ablation: Variant::Proposed.config(),
            template: PromptTemplate::default(),
            image_stats: ImageNormStats::default(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.patch.input_len
    }

    pub fn tokens_per_frame(&self) -> usize {
        let side = self.image_size / self.vision.patch;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.patch.validate()?;
        self.vision.validate()?;
        self.llm.validate()?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % self.vision.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by vision patch {}",
                self.image_size, self.vision.patch
            )));
        }
        if self.frames == 0 || self.frame_stride == 0 {
            return Err(Error::InvalidArgument("frames and frame stride must be at least 1".into()));
        }
        if self.fusion_heads == 0 || self.patch.d_model % self.fusion_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible into {} fusion heads",
                self.patch.d_model, self.fusion_heads
            )));
        }
        if self.ablation.uses_soft_prompt() && self.n_soft == 0 {
            return Err(Error::InvalidArgument("soft prompt enabled with n_soft = 0".into()));
        }
        Ok(())
    }

    fn fusion_dims(&self) -> FusionParams {
        FusionParams {
            d_llm: self.llm.dim,
            d_model: self.patch.d_model,
            heads: self.fusion_heads,
            n_query: if self.ablation.use_tam { self.patch.n_patches() } else { 1 },
            horizon: self.horizon,
        }
    }

    fn vision_projection(&self) -> VisionProjection {
        VisionProjection {
            d_vis: self.vision.dim * self.frames,
            d_llm: self.llm.dim,
        }
    }

    /// Flat `key -> value` description, stored in checkpoints.
    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("horizon", self.horizon.to_string());
        put("input_len", self.patch.input_len.to_string());
        put("patch_len", self.patch.patch_len.to_string());
        put("stride", self.patch.stride.to_string());
        put("d_model", self.patch.d_model.to_string());
        put("layers", self.patch.layers.to_string());
        put("heads", self.patch.heads.to_string());
        for (p, c) in [("vision", &self.vision), ("llm", &self.llm)] {
            put(&format!("{p}_seed"), c.seed.to_string());
            put(&format!("{p}_depth"), c.depth.to_string());
            put(&format!("{p}_dim"), c.dim.to_string());
            put(&format!("{p}_heads"), c.heads.to_string());
            put(&format!("{p}_patch"), c.patch.to_string());
        }
        put("image_size", self.image_size.to_string());
        put("camera_size", self.camera_size.to_string());
        put("frames", self.frames.to_string());
        put("frame_stride", self.frame_stride.to_string());
        put("n_soft", self.n_soft.to_string());
        put("fusion_heads", self.fusion_heads.to_string());
        let a = &self.ablation;
        put("use_tam", a.use_tam.to_string());
        put("use_pam", a.use_pam.to_string());
        put("use_vam", a.use_vam.to_string());
        put("use_soft_prompt", a.use_soft_prompt.to_string());
        put(
            "variant",
            a.variant().map(|v| v.cli_name().to_string()).unwrap_or_else(|| "custom".into()),
        );
        put("template", escape(&self.template.to_text()));
        let floats = |v: &[f32; 3]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        put("image_mean", floats(&self.image_stats.mean));
        put("image_std", floats(&self.image_stats.std));
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("manifest lacks `{k}`")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::MalformedCheckpoint(format!("manifest `{k}` = {v:?} is not valid")))
        }
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        let flag = |k: &str| -> Result<bool> { num(k, get(k)?) };
        let enc = |p: &str| -> Result<FrozenEncoderConfig> {
            Ok(FrozenEncoderConfig {
                seed: num(&format!("{p}_seed"), get(&format!("{p}_seed"))?)?,
                depth: n(&format!("{p}_depth"))?,
                dim: n(&format!("{p}_dim"))?,
                heads: n(&format!("{p}_heads"))?,
                patch: n(&format!("{p}_patch"))?,
            })
        };
        let floats = |k: &str| -> Result<[f32; 3]> {
            let v: Vec<f32> = get(k)?.split(',').map(|s| num(k, s)).collect::<Result<_>>()?;
            v.try_into()
                .map_err(|_| Error::MalformedCheckpoint(format!("manifest `{k}` needs three values")))
        };
        let cfg = Self {
            horizon: n("horizon")?,
            patch: PatchConfig {
                input_len: n("input_len")?,
                patch_len: n("patch_len")?,
                stride: n("stride")?,
                d_model: n("d_model")?,
                layers: n("layers")?,
                heads: n("heads")?,
            },
            vision: enc("vision")?,
            llm: enc("llm")?,
            image_size: n("image_size")?,
            camera_size: n("camera_size")?,
            frames: n("frames")?,
            frame_stride: n("frame_stride")?,
            n_soft: n("n_soft")?,
            fusion_heads: n("fusion_heads")?,
            ablation: AblationConfig {
                use_tam: flag("use_tam")?,
                use_pam: flag("use_pam")?,
                use_vam: flag("use_vam")?,
                use_soft_prompt: flag("use_soft_prompt")?,
            },
            template: PromptTemplate::parse(&unescape(get("template")?))?,
            image_stats: ImageNormStats {
                mean: floats("image_mean")?,
                std: floats("image_std")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Configuration plus the trainable and frozen tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Trainable tensors come from `seed`; frozen encoders from their own
    /// configured seeds.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let abl = config.ablation;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if abl.use_tam {
            store.extend_trainable(temporal_params(&config.patch, &mut rng)?);
        }
        if abl.use_vam {
            store.extend_trainable(config.vision_projection().init(&mut rng));
            store.extend_frozen(vision_encoder_params(&config.vision)?);
        }
        let fusion = config.fusion_dims();
        if abl.uses_llm() {
            if abl.uses_soft_prompt() {
                let soft = SoftPrompt {
                    n_soft: config.n_soft,
                    d_llm: config.llm.dim,
                };
                store.insert_trainable(SOFT_PROMPT, soft.init(&mut rng));
            }
            store.extend_frozen(llm_params(&config.llm)?);
            store.extend_trainable(fusion.init(abl.use_tam, &mut rng));
        }
        store.extend_trainable(fusion.init_output(&mut rng));
        Ok(Self { config, store })
    }

    /// Inputs of one sample that do not depend on trainable parameters.
    pub fn features(&self, sample: &SampleRecord, trace: &mut ForwardTrace) -> Result<SampleFeatures> {
        let cfg = &self.config;
        let abl = cfg.ablation;
        if sample.input_len() != cfg.input_len() {
            return Err(Error::ManifestMismatch {
                field: "input_len".into(),
                expected: cfg.input_len().to_string(),
                found: sample.input_len().to_string(),
            });
        }
        if sample.horizon() != cfg.horizon {
            return Err(Error::ManifestMismatch {
                field: "horizon".into(),
                expected: cfg.horizon.to_string(),
                found: sample.horizon().to_string(),
            });
        }
        let (normalized, norm) = normalize_window(&sample.input_window)?;
        let target: Vec<f64> = sample.target.iter().map(|&v| v as f64).collect();
        let patches = if abl.use_tam {
            Some(patchify(&normalized, &cfg.patch)?)
        } else {
            None
        };
        let tokens = if abl.use_pam {
            trace.text += 1;
            let stats = compute_stats(&sample.input_window)?;
            let text = render_prompt(&stats, cfg.horizon, cfg.input_len(), &cfg.template)?;
            tokenize(&text)
        } else {
            Vec::new()
        };
        let image_tokens = if abl.use_vam {
            trace.image += 1;
            if sample.images.len() < cfg.frames {
                return Err(Error::InvalidArgument(format!(
                    "sample carries {} frames, model needs {}",
                    sample.images.len(),
                    cfg.frames
                )));
            }
            let frames = &sample.images[sample.images.len() - cfg.frames..];
            let mut parts = Vec::with_capacity(frames.len());
            for img in frames {
                if img.width != cfg.camera_size || img.height != cfg.camera_size {
                    return Err(Error::ManifestMismatch {
                        field: "camera_size".into(),
                        expected: cfg.camera_size.to_string(),
                        found: format!("{}x{}", img.width, img.height),
                    });
                }
                let x = preprocess(img, cfg.image_size, &cfg.image_stats)?;
                parts.push(encode_image_with(&self.store, &x, &cfg.vision)?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Some(crate::numerics::concat(&refs, 1)?)
        } else {
            None
        };
        Ok(SampleFeatures {
            norm,
            patches,
            target_norm: norm.normalize(&target),
            tokens,
            image_tokens,
        })
    }

    /// Builds the forward pass on `g` and returns the normalized forecast.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        feats: &SampleFeatures,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let cfg = &self.config;
        let abl = cfg.ablation;
        abl.validate()?;
        let e_temporal = match &feats.patches {
            Some(p) if abl.use_tam => {
                trace.temporal += 1;
                let pv = g.constant(p);
                Some(encode_temporal(g, b, pv, &cfg.patch)?.0)
            }
            _ => None,
        };
        if !abl.uses_llm() {
            let e = e_temporal.ok_or(Error::NoModality)?;
            return output_projection(g, b, e);
        }

        let soft = if abl.uses_soft_prompt() {
            Some(b.var(g, SOFT_PROMPT)?)
        } else {
            None
        };
        let text = if abl.use_pam {
            embed_text_var(g, b, &feats.tokens)?
        } else {
            None
        };
        let image = match &feats.image_tokens {
            Some(f) if abl.use_vam => {
                trace.vision_projection += 1;
                let fv = g.constant(f);
                Some(cfg.vision_projection().project(g, b, fv)?)
            }
            _ => None,
        };
        trace.llm += 1;
        let e_llm = llm_forward(g, b, soft, text, image, &cfg.llm)?;
        trace.kv_tokens = Some(g.shape(e_llm)[0]);

        let (e_llm_p, e_t_p) = project_modalities(g, b, e_llm, e_temporal)?;
        let query = match e_t_p {
            Some(q) => q,
            None => g.mean_axis(e_llm_p, 0)?,
        };
        trace.fusion += 1;
        let (attn, _) = cross_modal_attention(g, b, query, e_llm_p, cfg.fusion_heads)?;
        let fused = fuse(g, b, query, attn)?;
        output_projection(g, b, fused)
    }

    /// Forecast in kW.
    pub fn forward(&self, sample: &SampleRecord) -> Result<Vec<f64>> {
        self.forward_traced(sample, &mut ForwardTrace::default())
    }

    pub fn forward_traced(&self, sample: &SampleRecord, trace: &mut ForwardTrace) -> Result<Vec<f64>> {
        let feats = self.features(sample, trace)?;
        self.predict(&feats, trace)
    }

    /// Forecast in kW from precomputed features.
    pub fn predict(&self, feats: &SampleFeatures, trace: &mut ForwardTrace) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store);
        let y = self.forward_graph(&mut g, &mut b, feats, trace)?;
        Ok(feats.norm.denormalize(g.value(y)))
    }
}

/// Runs `model` on `sample` under the ablation switches `abl`. The model
/// must hold the parameters the enabled branches need.
pub fn forward(sample: &SampleRecord, model: &ModelParams, abl: AblationConfig) -> Result<Vec<f64>> {
    abl.validate()?;
    if abl == model.config.ablation {
        return model.forward(sample);
    }
    let view = ModelParams {
        config: ModelConfig {
            ablation: abl,
            ..model.config.clone()
        },
        store: model.store.clone(),
    };
    view.forward(sample)
}

/// Per-sample inputs that stay fixed during training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub norm: WindowNorm,
    pub patches: Option<Tensor>,
    /// Target in the input window's normalized units.
    pub target_norm: Vec<f64>,
    pub tokens: Vec<u32>,
    /// Frozen encoder output of every frame, stacked along the feature axis.
    pub image_tokens: Option<Tensor>,
}

/// Counts of branch evaluations, for checking which paths ran.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub temporal: usize,
    pub text: usize,
    pub image: usize,
    pub vision_projection: usize,
    pub llm: usize,
    pub fusion: usize,
    /// Key/value token count seen by the cross attention.
    pub kv_tokens: Option<usize>,
}
