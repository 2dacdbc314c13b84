//! Modality-matched text embeddings built from the full class list.
//!
//! Each class is wrapped in a per-modality prompt, the prompts are joined into
//! one text input per stream and encoded once by the frozen text encoder. `K`
//! trainable soft-prompt rows are prepended after encoding, separately for
//! the visual and audio streams.

use std::collections::HashSet;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::encoders::{Backbone, Modality};
use crate::error::{Error, Result};
use crate::init::{normal, sub_rng};
use crate::tensor::Tensor;

pub const VISUAL_TEMPLATE: &str = "a video of {class}";
pub const AUDIO_TEMPLATE: &str = "a sound of {class}";
pub const SOFT_PROMPT_STD: f64 = 0.02;

pub const DEFAULT_CLASSES: [&str; 6] = [
    "church bell",
    "male speech",
    "dog barking",
    "acoustic guitar",
    "helicopter",
    "baby crying",
];

pub fn default_classes(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| DEFAULT_CLASSES.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string()))
        .collect()
}

/// One class per line, order preserved; blank lines are skipped.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let classes: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    check_classes(&classes)?;
    Ok(classes)
}

fn check_classes(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Config("class list is empty".into()));
    }
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(Error::Config(format!("duplicate class name {c:?}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextAnchor {
    pub class_names: Vec<String>,
    pub k: usize,
    /// `[K, D_t]`, absent when `K = 0`.
    pub soft_prompts_v: Option<Tensor>,
    pub soft_prompts_a: Option<Tensor>,
    /// Frozen encoder output, `[L, D_t]`.
    pub frozen_v: Tensor,
    pub frozen_a: Tensor,
    /// `[K + L, D_t]`, soft rows first.
    pub encoded_v: Tensor,
    pub encoded_a: Tensor,
}

/// The anchor as it sits on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AnchorVars {
    pub visual: Var,
    pub audio: Var,
    pub soft_v: Option<Var>,
    pub soft_a: Option<Var>,
}

impl TextAnchor {
    pub fn build(classes: &[String], backbone: &Backbone, k: usize, seed: u64) -> Result<TextAnchor> {
        check_classes(classes)?;
        if classes.len() != backbone.config.n_classes {
            return Err(Error::Config(format!(
                "{} class names for a codebook of {} classes",
                classes.len(),
                backbone.config.n_classes
            )));
        }
        let encode = |m: Modality| -> Result<Tensor> {
            let d = backbone.config.d_text;
            let mut tokens = Vec::new();
            for c in 0..classes.len() {
                tokens.extend_from_slice(backbone.prompt_tokens(m, c)?.data());
            }
            let l = tokens.len() / d;
            backbone.encode_text(&Tensor::new(vec![l, d], tokens)?)
        };
        let frozen_v = encode(Modality::Visual)?;
        let frozen_a = encode(Modality::Audio)?;
        let d = backbone.config.d_text;
        let mut r = sub_rng(seed, "soft_prompts");
        let (soft_v, soft_a) = if k == 0 {
            (None, None)
        } else {
            (
                Some(normal(&[k, d], SOFT_PROMPT_STD, &mut r)),
                Some(normal(&[k, d], SOFT_PROMPT_STD, &mut r)),
            )
        };
        let mut anchor = TextAnchor {
            class_names: classes.to_vec(),
            k,
            soft_prompts_v: soft_v,
            soft_prompts_a: soft_a,
            encoded_v: frozen_v.clone(),
            encoded_a: frozen_a.clone(),
            frozen_v,
            frozen_a,
        };
        anchor.refresh();
        Ok(anchor)
    }

    /// Number of frozen text-token rows `L`.
    pub fn n_text_tokens(&self) -> usize {
        self.frozen_v.shape()[0]
    }

    pub fn n_rows(&self) -> usize {
        self.k + self.n_text_tokens()
    }

    pub fn width(&self) -> usize {
        self.frozen_v.last_dim()
    }

    /// Prompt strings, in class order, for one stream.
    pub fn prompts(&self, modality: Modality) -> Vec<String> {
        let template = match modality {
            Modality::Audio => AUDIO_TEMPLATE,
            _ => VISUAL_TEMPLATE,
        };
        self.class_names
            .iter()
            .map(|c| template.replace("{class}", c))
            .collect()
    }

    /// Re-concatenates soft and frozen rows after the soft prompts change.
    pub fn refresh(&mut self) {
        let join = |soft: &Option<Tensor>, frozen: &Tensor| -> Tensor {
            match soft {
                None => frozen.clone(),
                Some(s) => {
                    let mut data = s.data().to_vec();
                    data.extend_from_slice(frozen.data());
                    Tensor::from_parts(vec![s.shape()[0] + frozen.shape()[0], frozen.last_dim()], data)
                }
            }
        };
        self.encoded_v = join(&self.soft_prompts_v, &self.frozen_v);
        self.encoded_a = join(&self.soft_prompts_a, &self.frozen_a);
    }

    /// Places the anchor on `tape`: soft rows as trainable leaves, encoder
    /// rows as constants.
    pub fn on_tape<'a>(&'a self, tape: &mut Tape<'a>, train_soft: bool) -> Result<AnchorVars> {
        let mut place = |soft: &'a Option<Tensor>, frozen: &'a Tensor| -> Result<(Var, Option<Var>)> {
            let f = tape.constant(frozen);
            match soft {
                None => Ok((f, None)),
                Some(s) => {
                    let sv = if train_soft { tape.param(s) } else { tape.constant(s) };
                    Ok((tape.concat(&[sv, f], 0)?, Some(sv)))
                }
            }
        };
        let (visual, soft_v) = place(&self.soft_prompts_v, &self.frozen_v)?;
        let (audio, soft_a) = place(&self.soft_prompts_a, &self.frozen_a)?;
        Ok(AnchorVars {
            visual,
            audio,
            soft_v,
            soft_a,
        })
    }

    pub fn trainable_count(&self) -> usize {
        [&self.soft_prompts_v, &self.soft_prompts_a]
            .iter()
            .filter_map(|s| s.as_ref())
            .map(Tensor::numel)
            .sum()
    }
}
