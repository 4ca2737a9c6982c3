//! Multimodal prompt construction for one query/candidate pair.

use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::codec::SCORE_KEY;
use crate::retrieval::PlaceRecord;

const DEFAULT_SYSTEM: &str = include_str!("prompts/system.txt");
const DEFAULT_USER: &str = include_str!("prompts/user.txt");

/// Line separating the system and user sections of a template file.
pub const USER_MARKER: &str = "---USER---";
pub const DEFAULT_SCHEMA_VERSION: &str = "vpr-cot/1";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("{role} image not found: {}", path.display())]
    MissingFile { role: ImageRole, path: PathBuf },
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported image type `{0}` (expected png, jpg, jpeg or webp)")]
    UnsupportedImageType(String),
    #[error("could not resize {}: {message}", path.display())]
    Resize { path: PathBuf, message: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRole {
    Query,
    Candidate,
}

impl std::fmt::Display for ImageRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImageRole::Query => "query",
            ImageRole::Candidate => "candidate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    pub schema_version: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_text: DEFAULT_SYSTEM.trim().to_owned(),
            user_text: DEFAULT_USER.trim().to_owned(),
            schema_version: DEFAULT_SCHEMA_VERSION.to_owned(),
        }
    }
}

impl PromptTemplate {
    pub fn new(system_text: String, user_text: String, schema_version: String) -> Result<Self, PromptError> {
        let t = PromptTemplate {
            system_text,
            user_text,
            schema_version,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.system_text.trim().is_empty() {
            return Err(PromptError::InvalidTemplate("system text is empty".into()));
        }
        if self.user_text.trim().is_empty() {
            return Err(PromptError::InvalidTemplate("user text is empty".into()));
        }
        if !self.user_text.contains(SCORE_KEY) {
            return Err(PromptError::InvalidTemplate(format!(
                "user text must mention `{SCORE_KEY}`"
            )));
        }
        Ok(())
    }

    /// Parses an override file: system text, a line reading `---USER---`,
    /// then user text.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut seen_marker = false;
        for line in text.lines() {
            if line.trim() == USER_MARKER {
                if seen_marker {
                    return Err(PromptError::InvalidTemplate(format!(
                        "`{USER_MARKER}` appears more than once"
                    )));
                }
                seen_marker = true;
                continue;
            }
            if seen_marker { &mut user } else { &mut system }.push(line);
        }
        if !seen_marker {
            return Err(PromptError::InvalidTemplate(format!("missing `{USER_MARKER}` line")));
        }
        PromptTemplate::new(
            system.join("\n").trim().to_owned(),
            user.join("\n").trim().to_owned(),
            "custom".to_owned(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_owned(),
            source,
        })?;
        PromptTemplate::parse(&text)
    }

    /// Stable digest of both texts; part of the pair cache key.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub media_type: String,
    pub data: String,
}

impl EncodedImage {
    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.data)
    }
}

/// Image handling for prompt construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImageOptions {
    /// Downscale so the longer side is at most this many pixels.
    pub max_side: Option<u32>,
}

pub fn media_type_for(path: &Path) -> Result<&'static str, PromptError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => Ok("image/png"),
        "jpg" | "jpeg" => Ok("image/jpeg"),
        "webp" => Ok("image/webp"),
        _ => Err(PromptError::UnsupportedImageType(ext)),
    }
}

/// Reads an image and base64-encodes its bytes unchanged.
pub fn encode_image_data_url(path: impl AsRef<Path>) -> Result<EncodedImage, PromptError> {
    encode_image(path.as_ref(), ImageRole::Query, ImageOptions::default())
}

fn encode_image(path: &Path, role: ImageRole, opts: ImageOptions) -> Result<EncodedImage, PromptError> {
    let media_type = media_type_for(path)?;
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            PromptError::MissingFile {
                role,
                path: path.to_owned(),
            }
        } else {
            PromptError::Io {
                path: path.to_owned(),
                source,
            }
        }
    })?;
    if let Some(max_side) = opts.max_side {
        if let Some(png) = downscale(&bytes, max_side).map_err(|message| PromptError::Resize {
            path: path.to_owned(),
            message,
        })? {
            return Ok(EncodedImage {
                media_type: "image/png".into(),
                data: BASE64.encode(png),
            });
        }
    }
    Ok(EncodedImage {
        media_type: media_type.into(),
        data: BASE64.encode(bytes),
    })
}

/// Re-encodes as PNG when the longer side exceeds `max_side`; `None` when
/// the image already fits.
fn downscale(bytes: &[u8], max_side: u32) -> Result<Option<Vec<u8>>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    if img.width().max(img.height()) <= max_side {
        return Ok(None);
    }
    let resized = img.resize(max_side, max_side, image::imageops::FilterType::Triangle);
    let mut out = Cursor::new(Vec::new());
    resized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(Some(out.into_inner()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image(EncodedImage),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

/// A validated system + user message pair carrying two images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageSequence {
    messages: Vec<Message>,
}

impl MessageSequence {
    pub fn new(messages: Vec<Message>) -> Result<Self, PromptError> {
        let bad = |m: &str| Err(PromptError::InvalidTemplate(m.to_owned()));
        match messages.as_slice() {
            [sys, user] if sys.role == Role::System && user.role == Role::User => {
                let images = user.parts.iter().filter(|p| matches!(p, ContentPart::Image(_))).count();
                let texts = user.parts.iter().filter(|p| matches!(p, ContentPart::Text(_))).count();
                if images != 2 {
                    return bad("user message must carry exactly two images");
                }
                if texts == 0 {
                    return bad("user message needs a text part");
                }
                if sys.parts.iter().any(|p| matches!(p, ContentPart::Image(_))) {
                    return bad("system message cannot carry images");
                }
            }
            _ => return bad("expected one system message followed by one user message"),
        }
        Ok(MessageSequence { messages })
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Chat-completions `messages` array.
    pub fn to_wire(&self) -> Value {
        Value::Array(
            self.messages
                .iter()
                .map(|m| match m.role {
                    Role::System => json!({
                        "role": "system",
                        "content": m.parts.iter().filter_map(|p| match p {
                            ContentPart::Text(t) => Some(t.as_str()),
                            ContentPart::Image(_) => None,
                        }).collect::<Vec<_>>().join("\n"),
                    }),
                    Role::User => json!({
                        "role": "user",
                        "content": m.parts.iter().map(|p| match p {
                            ContentPart::Text(t) => json!({"type": "text", "text": t}),
                            ContentPart::Image(img) => json!({
                                "type": "image_url",
                                "image_url": {"url": img.data_url()},
                            }),
                        }).collect::<Vec<_>>(),
                    }),
                })
                .collect(),
        )
    }
}

/// Builds the two-message prompt for a pair: the system instruction, then
/// one user turn with the instruction text, the query image and the
/// candidate image, in that order.
pub fn build_messages(
    query: &PlaceRecord,
    candidate: &PlaceRecord,
    template: &PromptTemplate,
    opts: ImageOptions,
) -> Result<MessageSequence, PromptError> {
    template.validate()?;
    let q = encode_image(&query.image_path, ImageRole::Query, opts)?;
    let c = encode_image(&candidate.image_path, ImageRole::Candidate, opts)?;
    MessageSequence::new(vec![
        Message {
            role: Role::System,
            parts: vec![ContentPart::Text(template.system_text.clone())],
        },
        Message {
            role: Role::User,
            parts: vec![
                ContentPart::Text(template.user_text.clone()),
                ContentPart::Image(q),
                ContentPart::Image(c),
            ],
        },
    ])
}
