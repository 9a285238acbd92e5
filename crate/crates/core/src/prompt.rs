//! Prompt construction: window statistics, template rendering, byte-level
//! tokenization, the frozen text embedding lookup and the soft prompt.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Binder, Graph, Tensor, Var};

pub const VOCAB_SIZE: usize = 256;
pub const DEFAULT_N_SOFT: usize = 8;
pub const TEXT_TABLE: &str = "text.table";
pub const SOFT_PROMPT: &str = "soft.emb";

const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    Upward,
    Downward,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Upward => "upward",
            Trend::Downward => "downward",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptStats {
    pub min_val: f64,
    pub max_val: f64,
    pub median_val: f64,
    pub trend: Trend,
    /// Lag indices in descending order of autocorrelation.
    pub top_lags: Vec<usize>,
}

/// Biased sample autocorrelation at lag `k`. Zero for a constant series.
pub fn autocorrelation(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 || k >= n {
        return 0.0;
    }
    let num: f64 = (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum();
    num / denom
}

pub fn compute_stats(window: &[f32]) -> Result<PromptStats> {
    let n = window.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("statistics need at least 4 values, got {n}")));
    }
    let x: Vec<f64> = window.iter().map(|&v| v as f64).collect();
    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let median_val = if n % 2 == 0 {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let diff_sum: f64 = x.windows(2).map(|w| w[1] - w[0]).sum();
    let trend = if diff_sum >= 0.0 {
        Trend::Upward
    } else {
        Trend::Downward
    };
    let mut lags: Vec<(usize, f64)> = (1..=n / 2).map(|k| (k, autocorrelation(&x, k))).collect();
    lags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(PromptStats {
        min_val: sorted[0],
        max_val: sorted[n - 1],
        median_val,
        trend,
        top_lags: lags.into_iter().take(5).map(|(k, _)| k).collect(),
    })
}

/// Text blocks of the prompt. Slots are written `<Name>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub dataset_description: String,
    pub image_description: String,
    pub instruction: String,
    pub statistics_clause: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is well formed")
    }
}

impl PromptTemplate {
    /// Instruction and statistics only, for short token budgets.
    pub fn compact() -> Self {
        Self {
            dataset_description: String::new(),
            image_description: String::new(),
            ..Self::default()
        }
    }

    /// Parses the sectioned text format (`[dataset]`, `[image]`,
    /// `[instruction]`, `[statistics]` headers, each followed by its text).
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: [Option<String>; 4] = Default::default();
        let mut current: Option<usize> = None;
        for line in text.lines() {
            let idx = match line.trim() {
                "[dataset]" => Some(0),
                "[image]" => Some(1),
                "[instruction]" => Some(2),
                "[statistics]" => Some(3),
                _ => None,
            };
            if let Some(i) = idx {
                sections[i] = Some(String::new());
                current = Some(i);
                continue;
            }
            match current {
                Some(i) => {
                    let s = sections[i].as_mut().expect("section opened");
                    if !s.is_empty() {
                        s.push('\n');
                    }
                    s.push_str(line);
                }
                None if line.trim().is_empty() => {}
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "template text before the first section header: {line:?}"
                    )))
                }
            }
        }
        let [d, i, ins, st] = sections;
        let need = |s: Option<String>, name: &str| {
            s.map(|t| t.trim().to_string())
                .ok_or_else(|| Error::InvalidArgument(format!("template lacks a [{name}] section")))
        };
        Ok(Self {
            dataset_description: need(d, "dataset")?,
            image_description: need(i, "image")?,
            instruction: need(ins, "instruction")?,
            statistics_clause: need(st, "statistics")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "[dataset]\n{}\n[image]\n{}\n[instruction]\n{}\n[statistics]\n{}\n",
            self.dataset_description, self.image_description, self.instruction, self.statistics_clause
        )
    }
}

fn find_slot(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        if let Some(close) = after.find('>') {
            let name = &after[..close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ' ') {
                return Some(&rest[open..open + close + 2]);
            }
        }
        rest = after;
    }
    None
}

pub fn render_prompt(stats: &PromptStats, horizon: usize, input_size: usize, tmpl: &PromptTemplate) -> Result<String> {
    let lags = stats
        .top_lags
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    let fill = |s: &str| {
        s.replace("<Horizon>", &horizon.to_string())
            .replace("<Input Size>", &input_size.to_string())
            .replace("<min_val>", &format!("{:.3}", stats.min_val))
            .replace("<max_val>", &format!("{:.3}", stats.max_val))
            .replace("<median_val>", &format!("{:.3}", stats.median_val))
            .replace("<trend>", &stats.trend.to_string())
            .replace("<lag_val>", &lags)
    };
    let text = [
        &tmpl.dataset_description,
        &tmpl.image_description,
        &tmpl.instruction,
        &tmpl.statistics_clause,
    ]
    .into_iter()
    .filter(|s| !s.is_empty())
    .map(|s| fill(s))
    .collect::<Vec<_>>()
    .join("\n");
    if let Some(slot) = find_slot(&text) {
        return Err(Error::UnfilledSlot(slot.to_string()));
    }
    Ok(text)
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::TokenOutOfRange(t, VOCAB_SIZE)))
        .collect()
}

fn check_ids(tokens: &[u32]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < VOCAB_SIZE {
                Ok(t as usize)
            } else {
                Err(Error::TokenOutOfRange(t, VOCAB_SIZE))
            }
        })
        .collect()
}

/// Row lookup into the frozen `256 x d_llm` table. Empty token lists have no
/// tensor representation and yield `None`.
pub fn embed_text(tokens: &[u32], table: &Tensor) -> Result<Option<Tensor>> {
    let ids = check_ids(tokens)?;
    if ids.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let t = g.constant(table);
    let y = g.gather_rows(t, &ids)?;
    Ok(Some(g.to_tensor(y)))
}

pub(crate) fn embed_text_var(g: &mut Graph, b: &mut Binder, tokens: &[u32]) -> Result<Option<Var>> {
    let ids = check_ids(tokens)?;
    if ids.is_empty() {
        return Ok(None);
    }
    let table = b.var(g, TEXT_TABLE)?;
    Ok(Some(g.gather_rows(table, &ids)?))
}

pub fn init_text_table<R: Rng + ?Sized>(d_llm: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[VOCAB_SIZE, d_llm], 1.0, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftPrompt {
    pub n_soft: usize,
    pub d_llm: usize,
}

impl SoftPrompt {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        Tensor::uniform(&[self.n_soft, self.d_llm], 0.5, rng)
    }
}
