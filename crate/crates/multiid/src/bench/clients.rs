//! Service clients used while building the benchmark, with deterministic
//! stubs and plain JSON-over-HTTP implementations.

use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use multiid_core::backend::InitialImageGenerator;
use multiid_core::toy::ToyInitialImageGenerator;

use crate::config::{RunConfig, Service};
use crate::error::{AppError, AppResult};
use crate::imageio::{decode_png, encode_png};

use super::templates;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{service} client: {message}")]
pub struct ClientError {
    pub service: &'static str,
    pub message: String,
}

impl ClientError {
    pub fn new(service: &'static str, message: impl Into<String>) -> Self {
        Self {
            service,
            message: message.into(),
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> ClientResult<String>;
}

pub trait TextToImageClient: Send + Sync {
    /// PNG bytes.
    fn generate(&self, prompt: &str, seed: u64) -> ClientResult<Vec<u8>>;
}

pub trait VlmClient: Send + Sync {
    /// `image` is PNG bytes; text-only questions pass `None`.
    fn ask(&self, image: Option<&[u8]>, prompt: &str) -> ClientResult<String>;
}

pub trait DetectorClient: Send + Sync {
    /// Pixel boxes `[x0, y0, x1, y1]` of every instance of `concept`.
    fn detect(&self, image: &[u8], concept: &str) -> ClientResult<Vec<[f64; 4]>>;
}

#[derive(Clone)]
pub struct Clients {
    pub llm: Arc<dyn LlmClient>,
    pub t2i: Arc<dyn TextToImageClient>,
    pub vlm: Arc<dyn VlmClient>,
    pub det: Arc<dyn DetectorClient>,
}

impl Clients {
    pub fn stub() -> Self {
        Self {
            llm: Arc::new(StubLlm),
            t2i: Arc::new(StubTextToImage),
            vlm: Arc::new(StubVlm),
            det: Arc::new(StubDetector),
        }
    }

    /// HTTP clients for every service; all four endpoints must be set.
    pub fn http(cfg: &RunConfig) -> AppResult<Self> {
        let ep = |s: Service| {
            let url = cfg
                .endpoint(s)
                .ok_or_else(|| AppError::Config(format!("no endpoint for {}; set {}", s.url_var(), s.url_var())))?;
            Ok::<_, AppError>(HttpEndpoint {
                url,
                key: std::env::var(s.key_var()).ok().filter(|k| !k.is_empty()),
                agent: ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(300)))
                    .build()
                    .into(),
            })
        };
        Ok(Self {
            llm: Arc::new(HttpLlm(ep(Service::Llm)?)),
            t2i: Arc::new(HttpTextToImage(ep(Service::T2i)?)),
            vlm: Arc::new(HttpVlm(ep(Service::Vlm)?)),
            det: Arc::new(HttpDetector(ep(Service::Det)?)),
        })
    }
}

// Stubs.

pub const STUB_INTERACTIONS: [&str; 40] = [
    "Back-to-back stand",
    "Shaking hands",
    "Hugging",
    "High five",
    "Walking side by side",
    "Dancing together",
    "Playing chess",
    "Sharing an umbrella",
    "Taking a selfie",
    "Carrying a box together",
    "Arm wrestling",
    "Sitting on a bench talking",
    "Cooking together",
    "Playing guitar and singing",
    "Passing a ball",
    "Fist bump",
    "Piggyback ride",
    "Reading a book together",
    "Clinking glasses",
    "Painting a wall",
    "Jogging together",
    "Looking at a map",
    "Feeding ducks",
    "Playing tennis",
    "Giving a gift",
    "Pointing at the sky",
    "Sitting back to back",
    "Holding hands",
    "Whispering a secret",
    "Building a sandcastle",
    "Playing video games",
    "Riding a tandem bicycle",
    "Studying at a desk",
    "Planting a tree",
    "Waving goodbye",
    "Having a picnic",
    "Rowing a boat",
    "Fixing a bicycle",
    "Posing for a photo",
    "Doing yoga",
];

const STUB_SETTINGS: [&str; 10] = [
    "in a sunny park",
    "on a city street at night",
    "inside a cozy living room",
    "on a sandy beach",
    "in a snowy forest",
    "at a busy train station",
    "in a bright office",
    "on a mountain trail",
    "in a flower garden",
    "under warm studio lights",
];

/// Answers the two prompt-preparation templates from fixed tables.
pub struct StubLlm;

impl LlmClient for StubLlm {
    fn complete(&self, prompt: &str) -> ClientResult<String> {
        if prompt == templates::INTERACTIONS {
            return Ok(STUB_INTERACTIONS
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{}. {s}", i + 1))
                .collect::<Vec<_>>()
                .join("\n"));
        }
        if let Some((n, interaction)) = templates::parse_expand(prompt) {
            return Ok((0..n)
                .map(|k| {
                    let setting = STUB_SETTINGS[k % STUB_SETTINGS.len()];
                    format!("{}. Two people {} {setting}", k + 1, interaction.to_lowercase())
                })
                .collect::<Vec<_>>()
                .join("\n"));
        }
        Err(ClientError::new("llm", "stub does not recognise the prompt"))
    }
}

pub struct StubTextToImage;

impl TextToImageClient for StubTextToImage {
    fn generate(&self, prompt: &str, seed: u64) -> ClientResult<Vec<u8>> {
        let img = ToyInitialImageGenerator
            .generate(prompt, seed)
            .map_err(|e| ClientError::new("t2i", e.to_string()))?;
        encode_png(&img).map_err(|e| ClientError::new("t2i", e.to_string()))
    }
}

const STUB_PEOPLE: [&str; 7] = ["man", "woman", "boy", "girl", "person", "child", "people"];
const STUB_STATES: [&str; 4] = [
    "standing upright with arms relaxed, smiling toward the camera",
    "leaning slightly forward, one hand raised, mouth open mid-laugh",
    "sitting with legs crossed, head tilted, calm expression",
    "walking mid-stride, arms swinging, looking to the side",
];
const STUB_LOOKS: [&str; 4] = [
    "short dark hair, young adult, navy denim jacket, white sneakers",
    "long auburn hair, adult, red knitted sweater, black jeans",
    "curly blond hair, teenager, green hoodie, grey shorts",
    "shaved head, middle-aged, beige trench coat, brown boots",
];

/// Names a man and a woman in every image, answers person-category questions
/// from a word list and writes State/Appearance annotations picked by image
/// content.
pub struct StubVlm;

impl VlmClient for StubVlm {
    fn ask(&self, image: Option<&[u8]>, prompt: &str) -> ClientResult<String> {
        if prompt == templates::CONCEPTS {
            return Ok("man, woman, tree".into());
        }
        if let Some(word) = templates::parse_category_question(prompt) {
            let yes = STUB_PEOPLE.contains(&word.to_lowercase().as_str());
            return Ok(if yes { "Yes" } else { "No" }.into());
        }
        if prompt == templates::ANNOTATE {
            let bytes = image.ok_or_else(|| ClientError::new("vlm", "annotation needs an image"))?;
            let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
            let state = STUB_STATES[(h % 4) as usize];
            let look = STUB_LOOKS[((h >> 8) % 4) as usize];
            return Ok(format!("State: {state}.\nAppearance: {look}."));
        }
        Err(ClientError::new("vlm", "stub does not recognise the prompt"))
    }
}

/// Puts "man" in the left half and "woman" in the right half.
pub struct StubDetector;

impl DetectorClient for StubDetector {
    fn detect(&self, image: &[u8], concept: &str) -> ClientResult<Vec<[f64; 4]>> {
        let img = decode_png(image).map_err(|e| ClientError::new("det", e.to_string()))?;
        let (h, w) = (img.shape()[1] as f64, img.shape()[2] as f64);
        Ok(match concept {
            "man" | "boy" => vec![[0.05 * w, 0.1 * h, 0.48 * w, 0.95 * h]],
            "woman" | "girl" => vec![[0.52 * w, 0.1 * h, 0.95 * w, 0.95 * h]],
            _ => Vec::new(),
        })
    }
}

// HTTP.

struct HttpEndpoint {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    fn post(&self, service: &'static str, body: &serde_json::Value) -> ClientResult<ureq::http::Response<ureq::Body>> {
        let mut req = self.agent.post(&self.url);
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        req.send_json(body).map_err(|e| ClientError::new(service, e.to_string()))
    }

    fn post_json(&self, service: &'static str, body: &serde_json::Value) -> ClientResult<serde_json::Value> {
        self.post(service, body)?
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::new(service, format!("bad response body: {e}")))
    }
}

fn text_field(service: &'static str, v: &serde_json::Value) -> ClientResult<String> {
    v.get("text")
        .and_then(|t| t.as_str())
        .map(String::from)
        .ok_or_else(|| ClientError::new(service, "response lacks a \"text\" string"))
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// `POST {"prompt"}` → `{"text"}`
struct HttpLlm(HttpEndpoint);

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str) -> ClientResult<String> {
        text_field("llm", &self.0.post_json("llm", &serde_json::json!({ "prompt": prompt }))?)
    }
}

/// `POST {"prompt", "seed"}` → PNG body
struct HttpTextToImage(HttpEndpoint);

impl TextToImageClient for HttpTextToImage {
    fn generate(&self, prompt: &str, seed: u64) -> ClientResult<Vec<u8>> {
        self.0
            .post("t2i", &serde_json::json!({ "prompt": prompt, "seed": seed }))?
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| ClientError::new("t2i", e.to_string()))
    }
}

/// `POST {"prompt", "image_png_base64"?}` → `{"text"}`
struct HttpVlm(HttpEndpoint);

impl VlmClient for HttpVlm {
    fn ask(&self, image: Option<&[u8]>, prompt: &str) -> ClientResult<String> {
        let mut body = serde_json::json!({ "prompt": prompt });
        if let Some(img) = image {
            body["image_png_base64"] = b64(img).into();
        }
        text_field("vlm", &self.0.post_json("vlm", &body)?)
    }
}

/// `POST {"image_png_base64", "concept"}` → `{"boxes": [[x0, y0, x1, y1], ...]}`
struct HttpDetector(HttpEndpoint);

impl DetectorClient for HttpDetector {
    fn detect(&self, image: &[u8], concept: &str) -> ClientResult<Vec<[f64; 4]>> {
        let v = self
            .0
            .post_json("det", &serde_json::json!({ "image_png_base64": b64(image), "concept": concept }))?;
        serde_json::from_value(v.get("boxes").cloned().unwrap_or_default())
            .map_err(|e| ClientError::new("det", format!("bad \"boxes\": {e}")))
    }
}
