//! JSON request format shared by the CLI and the HTTP service.
//!
//! ```json
//! {"prompt": "a red square moving",
//!  "entities": [{"description": "square",
//!                "first_box": [0.0, 0.0, 0.5, 0.5],
//!                "last_box": [0.5, 0.5, 1.0, 1.0],
//!                "reference": "red-square"}],
//!  "decode": {"steps": 12, "guidance_scale": 2.0, "temperature": 1.0, "seed": 7}}
//! ```
//!
//! `reference` is a swatch id or an inline crop `{"crop": [[4, 4], [4, 4]]}`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conditioning::NormBox;
use crate::synthworld::{Swatch, Vocabulary};
use crate::tokenizer::Frame;

use super::{DecodeConfig, EntityRequest, GenerationRequest};

/// A request problem tied to the JSON path of the offending field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for FieldError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireReference {
    Swatch(String),
    Inline { crop: Vec<Vec<u8>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireEntity {
    pub description: String,
    pub first_box: [f64; 4],
    pub last_box: [f64; 4],
    pub reference: WireReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WireDecode {
    pub steps: usize,
    pub guidance_scale: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for WireDecode {
    fn default() -> Self {
        let d = DecodeConfig::default();
        WireDecode {
            steps: d.steps,
            guidance_scale: d.guidance_scale,
            temperature: d.temperature,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub prompt: String,
    #[serde(default)]
    pub entities: Vec<WireEntity>,
    #[serde(default)]
    pub decode: WireDecode,
    #[serde(default)]
    pub extensions: usize,
}

/// Parses request JSON; structural errors carry the path of the bad field.
pub fn parse_request(json: &str) -> Result<WireRequest, FieldError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path == "?" { "body".to_string() } else { path };
        FieldError::new(field, e.into_inner().to_string())
    })
}

/// What a request is resolved against.
pub struct RequestContext<'a> {
    pub vocab: &'a Vocabulary,
    pub swatches: &'a [Swatch],
    pub palette_size: usize,
    pub prompt_len: usize,
    pub slots: usize,
    pub max_extensions: usize,
}

fn check_box(b: &[f64; 4], field: &str) -> Result<NormBox, FieldError> {
    if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(FieldError::new(field, "coordinates must lie in [0, 1]"));
    }
    if !(b[0] < b[2]) {
        return Err(FieldError::new(field, "x1 must be less than x2"));
    }
    if !(b[1] < b[3]) {
        return Err(FieldError::new(field, "y1 must be less than y2"));
    }
    Ok(NormBox::from_coords(*b))
}

impl WireRequest {
    /// Validates every field and builds the model-level request.
    pub fn resolve(&self, ctx: &RequestContext<'_>) -> Result<GenerationRequest, FieldError> {
        if self.prompt.trim().is_empty() {
            return Err(FieldError::new("prompt", "must not be empty"));
        }
        let prompt = ctx
            .vocab
            .tokenize(&self.prompt, ctx.prompt_len)
            .map_err(|e| FieldError::new("prompt", e.to_string()))?;
        if self.entities.len() > ctx.slots {
            return Err(FieldError::new(
                "entities",
                format!("at most {} entities are supported", ctx.slots),
            ));
        }
        let mut entities = Vec::with_capacity(self.entities.len());
        for (i, e) in self.entities.iter().enumerate() {
            let at = |f: &str| format!("entities[{i}].{f}");
            let description_id = ctx
                .vocab
                .id(&e.description.to_lowercase())
                .filter(|&id| ctx.vocab.shape_of(id).is_some())
                .ok_or_else(|| FieldError::new(at("description"), format!("unknown description {:?}", e.description)))?;
            let first_box = check_box(&e.first_box, &at("first_box"))?;
            let last_box = check_box(&e.last_box, &at("last_box"))?;
            let reference = match &e.reference {
                WireReference::Swatch(id) => {
                    let s = ctx
                        .swatches
                        .iter()
                        .find(|s| &s.id == id)
                        .ok_or_else(|| FieldError::new(at("reference"), format!("unknown swatch {id:?}")))?;
                    Frame::new(s.rows, s.cols, s.cells.clone()).expect("swatch cells match their size")
                }
                WireReference::Inline { crop } => {
                    let rows = crop.len();
                    let cols = crop.first().map_or(0, Vec::len);
                    if rows == 0 || cols == 0 || crop.iter().any(|r| r.len() != cols) {
                        return Err(FieldError::new(at("reference.crop"), "crop must be a non-empty rectangle"));
                    }
                    let cells: Vec<u8> = crop.concat();
                    if cells.iter().any(|&c| c as usize >= ctx.palette_size) {
                        return Err(FieldError::new(
                            at("reference.crop"),
                            format!("palette indices must be below {}", ctx.palette_size),
                        ));
                    }
                    Frame::new(rows, cols, cells).expect("rectangle checked")
                }
            };
            entities.push(EntityRequest {
                description_id,
                first_box,
                last_box,
                reference,
            });
        }
        let d = &self.decode;
        if d.steps == 0 {
            return Err(FieldError::new("decode.steps", "must be at least 1"));
        }
        if !d.guidance_scale.is_finite() || d.guidance_scale < 0.0 {
            return Err(FieldError::new("decode.guidance_scale", "must be finite and >= 0"));
        }
        if !d.temperature.is_finite() || d.temperature < 0.0 {
            return Err(FieldError::new("decode.temperature", "must be finite and >= 0"));
        }
        if self.extensions > ctx.max_extensions {
            return Err(FieldError::new(
                "extensions",
                format!("at most {} extensions", ctx.max_extensions),
            ));
        }
        Ok(GenerationRequest {
            prompt,
            entities,
            decode: DecodeConfig {
                steps: d.steps,
                guidance_scale: d.guidance_scale,
                temperature: d.temperature,
                seed: d.seed,
            },
            extensions: self.extensions,
        })
    }
}
