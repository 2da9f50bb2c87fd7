//! Deterministic stand-ins for every model service.
//!
//! Each mock's output is a pure function of its inputs (and the request seed
//! for chat), so a pipeline run over mocks replays bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    Backend, BackendError, Caption, CaptionBackend, ChatBackend, ChatRequest,
    ConditionedEditBackend, GroundingBackend, ImageEmbedder, InpaintBackend, PromptPurpose,
    RawDetection, TextEmbedder,
};
use crate::hashing::hash_u64;
use crate::imaging::Picture;
use crate::records::BoundingBox;

pub const FALLBACK_CAPTION: &str = "an image";

/// Category, replacement and a reasoning hint describing the replacement.
pub const REPLACEMENTS: &[(&str, &str, &str)] = &[
    ("butterfly", "bee", "an insect that makes honey"),
    ("flower", "tree", "something that grows tall and gives shade"),
    ("cat", "dog", "an animal that loves to fetch a ball"),
    ("dog", "cat", "a pet that purrs on your lap"),
    ("apple", "orange", "a citrus fruit full of vitamin C"),
    ("banana", "pineapple", "a spiky tropical fruit"),
    ("car", "bus", "a vehicle that carries many passengers"),
    ("bicycle", "motorcycle", "a two-wheeler with an engine"),
    ("cup", "bowl", "something you would serve soup in"),
    ("chair", "sofa", "a seat where the whole family can sit"),
    ("bird", "airplane", "something that flies with engines"),
    ("horse", "zebra", "a striped animal from the savanna"),
    ("boat", "swan", "a graceful white bird that swims"),
    ("clock", "calendar", "something that tracks days instead of hours"),
    ("lamp", "candle", "a light source from before electricity"),
    ("tree", "cactus", "a plant that survives in the desert"),
];

const GENERATION_FRAMES: &[&str] = &[
    "Imagine how this would look if it became {}.",
    "Someone wants the picture to tell the story of {} instead.",
    "Picture the moment right after the change that leads to {}.",
    "Think about what would need to happen for this to show {}.",
    "The owner would rather see {} here from now on.",
    "After a small transformation, this should remind everyone of {}.",
    "Make the scene fit a story where {} is the focus.",
    "Nobody would recognize it now, since it has turned into {}.",
];

const REASONING_FRAMES: &[&str] = &[
    "Let {hint} take the place of the {selected}.",
    "The {selected} does not belong here, so put {hint} there instead.",
    "Someone would rather see {hint} where the {selected} is.",
];

fn counter_version(name: &str) -> String {
    format!("{name}-1")
}

/// Mock chat model that recognizes the three prompt families.
#[derive(Debug, Default)]
pub struct MockChat {
    calls: AtomicUsize,
}

impl MockChat {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn generate(req: &ChatRequest) -> String {
        let slot = |k: &str| req.slots.get(k).map(String::as_str).unwrap_or("");
        let phrase = subject_phrase(slot("edited_caption"));
        let phrase = if phrase.is_empty() { "something new".to_string() } else { phrase };
        let base = hash_u64(&[
            slot("input_caption").as_bytes(),
            slot("edited_caption").as_bytes(),
            slot("original_instruction").as_bytes(),
        ]);
        let idx = (base.wrapping_add(req.seed) % GENERATION_FRAMES.len() as u64) as usize;
        GENERATION_FRAMES[idx].replace("{}", &phrase)
    }

    fn select(req: &ChatRequest) -> String {
        let count: u64 = req
            .slots
            .get("count")
            .and_then(|c| c.parse().ok())
            .filter(|&c| c > 0)
            .unwrap_or(1);
        let h = hash_u64(&[req.user_text.as_bytes()]).wrapping_add(req.seed);
        (h % count + 1).to_string()
    }

    fn replace(req: &ChatRequest) -> String {
        let candidates: Vec<&str> = req
            .slots
            .get("candidates")
            .map(|c| c.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
            .unwrap_or_default();
        let caption = req.slots.get("caption").map(String::as_str).unwrap_or("");
        let h = hash_u64(&[caption.as_bytes(), req.user_text.as_bytes()]).wrapping_add(req.seed);

        let known = candidates
            .iter()
            .find_map(|c| REPLACEMENTS.iter().find(|(cat, _, _)| cat.eq_ignore_ascii_case(c)));
        let (selected, target, hint) = match (known, candidates.is_empty()) {
            (Some((cat, target, hint)), _) => (cat.to_string(), target.to_string(), hint.to_string()),
            (None, false) => {
                let chosen = candidates[(h % candidates.len() as u64) as usize].to_string();
                let target = if chosen == "statue" { "sculpture" } else { "statue" };
                (chosen, target.to_string(), format!("a stone {target}"))
            }
            (None, true) => ("object".into(), "statue".into(), "a stone statue".into()),
        };
        let frame = REASONING_FRAMES[(h % REASONING_FRAMES.len() as u64) as usize];
        let instruction = frame.replace("{hint}", &hint).replace("{selected}", &selected);
        serde_json::json!({"selected": selected, "target": target, "instruction": instruction})
            .to_string()
    }
}

/// Lowercased subject of a caption with a leading "photo of" style prefix
/// and characters that look like structured syntax removed.
fn subject_phrase(caption: &str) -> String {
    let lower = caption.trim().trim_end_matches('.').to_lowercase();
    let prefixes = ["a photo of ", "photo of ", "an image of ", "image of ", "a picture of ", "picture of "];
    let stripped = prefixes
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .unwrap_or(&lower);
    stripped
        .chars()
        .filter(|c| !matches!(c, '{' | '}' | '[' | ']' | '"' | ':'))
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Backend for MockChat {
    fn name(&self) -> &str {
        "mock-chat"
    }

    fn version(&self) -> &str {
        "mock-chat-1"
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(match req.purpose {
            PromptPurpose::Generate => Self::generate(req),
            PromptPurpose::Select => Self::select(req),
            PromptPurpose::Replace => Self::replace(req),
            PromptPurpose::Other => {
                format!("ok {:016x}", hash_u64(&[req.system_text.as_bytes(), req.user_text.as_bytes()]) ^ req.seed)
            }
        })
    }
}

/// Chat backend replaying canned replies in order; the last reply repeats.
/// An empty reply string produces [`BackendError::EmptyCompletion`].
#[derive(Debug)]
pub struct ScriptedChat {
    replies: Vec<String>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "ScriptedChat needs at least one reply");
        ScriptedChat {
            replies,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("lock poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().expect("lock poisoned").len()
    }
}

impl Backend for ScriptedChat {
    fn name(&self) -> &str {
        "scripted-chat"
    }

    fn version(&self) -> &str {
        "scripted-1"
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut requests = self.requests.lock().expect("lock poisoned");
        let idx = requests.len().min(self.replies.len() - 1);
        requests.push(req.clone());
        let reply = &self.replies[idx];
        if reply.trim().is_empty() {
            Err(BackendError::EmptyCompletion)
        } else {
            Ok(reply.clone())
        }
    }
}

/// Captioner answering from a content-hash lookup table.
#[derive(Debug, Default)]
pub struct MockCaptioner {
    table: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl MockCaptioner {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        MockCaptioner {
            table,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockCaptioner {
    fn name(&self) -> &str {
        "mock-captioner"
    }

    fn version(&self) -> &str {
        "mock-captioner-1"
    }
}

impl CaptionBackend for MockCaptioner {
    fn caption(&self, image: &Picture) -> Result<Caption, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(match self.table.get(&image.hash) {
            Some(text) => Caption {
                text: text.clone(),
                warning: None,
            },
            None => Caption {
                text: FALLBACK_CAPTION.to_string(),
                warning: Some(format!(
                    "no fixture caption for image {}, used fallback",
                    &image.hash[..12.min(image.hash.len())]
                )),
            },
        })
    }
}

/// Grounder that knows a fixed vocabulary and places one box per
/// `(image, category)` from a hash of the two.
#[derive(Debug)]
pub struct MockGrounder {
    vocabulary: BTreeSet<String>,
    calls: AtomicUsize,
}

impl Default for MockGrounder {
    fn default() -> Self {
        let mut vocabulary: BTreeSet<String> =
            REPLACEMENTS.iter().map(|(c, _, _)| c.to_string()).collect();
        vocabulary.extend(["table", "person", "house"].map(String::from));
        MockGrounder {
            vocabulary,
            calls: AtomicUsize::new(0),
        }
    }
}

impl MockGrounder {
    pub fn with_vocabulary<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        MockGrounder {
            vocabulary: words.into_iter().map(Into::into).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockGrounder {
    fn name(&self) -> &str {
        "mock-grounder"
    }

    fn version(&self) -> &str {
        "mock-grounder-1"
    }
}

impl GroundingBackend for MockGrounder {
    fn ground(&self, image: &Picture, category: &str) -> Result<Vec<RawDetection>, BackendError> {
        if category.trim().is_empty() {
            return Err(BackendError::Precondition("category is empty".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        if !self.vocabulary.contains(&category.to_lowercase()) {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[image.hash.as_bytes(), category.as_bytes()]));
        let (w, h) = (image.width() as f64, image.height() as f64);
        let bw = (w * rng.gen_range(0.30..0.60)).round().max(1.0);
        let bh = (h * rng.gen_range(0.30..0.60)).round().max(1.0);
        let x0 = (rng.gen_range(0.0..=1.0) * (w - bw)).round();
        let y0 = (rng.gen_range(0.0..=1.0) * (h - bh)).round();
        let score = (rng.gen_range(5000u32..9900) as f64) / 10000.0;
        Ok(vec![RawDetection {
            category: category.to_string(),
            coords: [x0, y0, x0 + bw, y0 + bh],
            score,
        }])
    }
}

/// Inpainter that paints a striped pattern keyed by the target category
/// strictly inside the box.
#[derive(Debug, Default)]
pub struct MockInpainter {
    calls: AtomicUsize,
}

impl MockInpainter {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockInpainter {
    fn name(&self) -> &str {
        "mock-inpainter"
    }

    fn version(&self) -> &str {
        "mock-inpainter-1"
    }
}

impl InpaintBackend for MockInpainter {
    fn inpaint_replace(
        &self,
        image: &Picture,
        _selected: &str,
        bbox: &BoundingBox,
        target: &str,
    ) -> Result<Picture, BackendError> {
        bbox.check_within(image.width(), image.height())
            .map_err(BackendError::Precondition)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let digest = Sha256::digest(target.as_bytes());
        let base = [digest[0], digest[1], digest[2]];
        let dark = base.map(|c| (c as u16 * 3 / 4) as u8);
        let mut rgb = image.rgb.clone();
        for y in bbox.y_min..bbox.y_max {
            for x in bbox.x_min..bbox.x_max {
                let stripe = ((x - bbox.x_min) + (y - bbox.y_min)) / 3 % 2 == 0;
                rgb.put_pixel(x, y, Rgb(if stripe { base } else { dark }));
            }
        }
        Ok(Picture::new(rgb))
    }
}

/// Editor applying a global per-channel gain and offset derived from the
/// instruction text.
#[derive(Debug, Default)]
pub struct MockEditor {
    calls: AtomicUsize,
}

impl MockEditor {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockEditor {
    fn name(&self) -> &str {
        "mock-editor"
    }

    fn version(&self) -> &str {
        "mock-editor-1"
    }
}

impl ConditionedEditBackend for MockEditor {
    fn conditioned_edit(&self, image: &Picture, instruction: &str) -> Result<Picture, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Precondition("instruction is empty".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let d = Sha256::digest(instruction.as_bytes());
        let gain: [f64; 3] = std::array::from_fn(|c| 0.8 + d[c] as f64 / 255.0 * 0.2);
        let offset: [f64; 3] = std::array::from_fn(|c| (d[3 + c] as f64 - 128.0) / 4.0);
        let mut rgb = image.rgb.clone();
        for px in rgb.pixels_mut() {
            for c in 0..3 {
                px[c] = (px[c] as f64 * gain[c] + offset[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(Picture::new(rgb))
    }
}

pub const MOCK_EMBEDDING_DIM: usize = 64;
const POOL: u32 = 4;

/// Image embedder: 4×4 average-pooled colors (plus a bias term) projected
/// through a fixed random matrix seeded by the slot name.
#[derive(Debug)]
pub struct MockImageEmbedder {
    slot: String,
    version: String,
    projection: Vec<Vec<f64>>,
}

impl MockImageEmbedder {
    pub fn new(slot: &str) -> Self {
        let inputs = (POOL * POOL * 3 + 1) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[b"image-embedder", slot.as_bytes()]));
        let projection = (0..MOCK_EMBEDDING_DIM)
            .map(|_| (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        MockImageEmbedder {
            slot: slot.to_string(),
            version: counter_version(&format!("mock-{slot}")),
            projection,
        }
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }

    fn pooled(image: &Picture) -> Vec<f64> {
        let (w, h) = image.dims();
        let mut sums = vec![0.0; (POOL * POOL * 3) as usize];
        let mut counts = vec![0.0; (POOL * POOL) as usize];
        for (x, y, px) in image.rgb.enumerate_pixels() {
            let cell = ((y * POOL / h) * POOL + x * POOL / w) as usize;
            counts[cell] += 1.0;
            for c in 0..3 {
                sums[cell * 3 + c] += px[c] as f64 / 255.0;
            }
        }
        let mut features: Vec<f64> = sums
            .iter()
            .enumerate()
            .map(|(i, s)| if counts[i / 3] > 0.0 { s / counts[i / 3] } else { 0.0 })
            .collect();
        features.push(1.0);
        features
    }
}

impl Backend for MockImageEmbedder {
    fn name(&self) -> &str {
        "mock-image-embedder"
    }

    fn version(&self) -> &str {
        &self.version
    }
}

impl ImageEmbedder for MockImageEmbedder {
    fn embed_image(&self, image: &Picture) -> Result<Vec<f64>, BackendError> {
        let features = Self::pooled(image);
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(&features).map(|(w, f)| w * f).sum())
            .collect())
    }
}

/// Text embedder summing per-token pseudo-random vectors.
#[derive(Debug)]
pub struct MockTextEmbedder {
    slot: String,
    version: String,
}

impl MockTextEmbedder {
    pub fn new(slot: &str) -> Self {
        MockTextEmbedder {
            slot: slot.to_string(),
            version: counter_version(&format!("mock-{slot}-text")),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[self.slot.as_bytes(), token.as_bytes()]));
        (0..MOCK_EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl Backend for MockTextEmbedder {
    fn name(&self) -> &str {
        "mock-text-embedder"
    }

    fn version(&self) -> &str {
        &self.version
    }
}

impl TextEmbedder for MockTextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push("");
        }
        let mut acc = vec![0.0; MOCK_EMBEDDING_DIM];
        for token in tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn picture() -> Picture {
        Picture::new(RgbImage::from_fn(128, 96, |x, y| Rgb([x as u8, y as u8, 77])))
    }

    fn gen_request(seed: u64) -> ChatRequest {
        let mut req = ChatRequest::new("sys", "user text");
        req.purpose = PromptPurpose::Generate;
        req.seed = seed;
        req.slots = [
            ("input_caption", "photo of fruits"),
            ("edited_caption", "photo of a cake"),
            ("original_instruction", "turn fruits to a cake"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        req
    }

    #[test]
    fn chat_is_deterministic() {
        let chat = MockChat::default();
        let first = chat.chat(&gen_request(7)).unwrap();
        for _ in 0..100 {
            assert_eq!(chat.chat(&gen_request(7)).unwrap(), first);
        }
        assert_eq!(chat.calls(), 101);
    }

    #[test]
    fn consecutive_seeds_give_distinct_generations() {
        let chat = MockChat::default();
        let outs: BTreeSet<String> = (0..5).map(|s| chat.chat(&gen_request(s)).unwrap()).collect();
        assert_eq!(outs.len(), 5);
    }

    #[test]
    fn subject_phrase_strips_prefix_and_syntax() {
        assert_eq!(subject_phrase("Photo of a cake."), "a cake");
        assert_eq!(subject_phrase("a \"cake\" {x}"), "a cake x");
    }

    #[test]
    fn scripted_chat_replays_and_repeats_last() {
        let chat = ScriptedChat::new(["a", ""]);
        let req = ChatRequest::new("", "u");
        assert_eq!(chat.chat(&req).unwrap(), "a");
        assert_eq!(chat.chat(&req), Err(BackendError::EmptyCompletion));
        assert_eq!(chat.chat(&req), Err(BackendError::EmptyCompletion));
        assert_eq!(chat.calls(), 3);
    }

    #[test]
    fn captioner_falls_back_with_warning() {
        let pic = picture();
        let cap = MockCaptioner::new([(pic.hash.clone(), "a red wall".to_string())].into());
        assert_eq!(cap.caption(&pic).unwrap().text, "a red wall");
        let other = Picture::new(RgbImage::new(4, 4));
        let fallback = cap.caption(&other).unwrap();
        assert_eq!(fallback.text, FALLBACK_CAPTION);
        assert!(fallback.warning.is_some());
        assert_eq!(cap.caption(&other).unwrap(), fallback);
    }

    #[test]
    fn grounder_is_deterministic_and_misses_unknown_categories() {
        let g = MockGrounder::default();
        let pic = picture();
        let a = g.ground(&pic, "butterfly").unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, g.ground(&pic, "butterfly").unwrap());
        assert!(g.ground(&pic, "spaceship").unwrap().is_empty());
        let c = a[0].coords;
        assert!(c[0] >= 0.0 && c[2] <= 128.0 && c[1] >= 0.0 && c[3] <= 96.0);
    }

    #[test]
    fn inpainter_only_touches_the_box() {
        let pic = picture();
        let bbox = BoundingBox::new(0, 0, 64, 96).unwrap();
        let out = MockInpainter::default()
            .inpaint_replace(&pic, "cat", &bbox, "dog")
            .unwrap();
        for (x, y, px) in out.rgb.enumerate_pixels() {
            if x >= 64 {
                assert_eq!(px, pic.rgb.get_pixel(x, y));
            }
        }
        assert_ne!(out.hash, pic.hash);
        let again = MockInpainter::default()
            .inpaint_replace(&pic, "cat", &bbox, "dog")
            .unwrap();
        assert_eq!(again.hash, out.hash);
    }

    #[test]
    fn editor_is_deterministic_and_rejects_empty_instruction() {
        let e = MockEditor::default();
        let pic = picture();
        assert_eq!(
            e.conditioned_edit(&pic, "make it snowy").unwrap(),
            e.conditioned_edit(&pic, "make it snowy").unwrap()
        );
        assert!(e.conditioned_edit(&pic, " ").is_err());
    }

    #[test]
    fn embedders_are_deterministic_and_nonzero() {
        let clip = MockImageEmbedder::new("clip-like");
        let dino = MockImageEmbedder::new("dino-like");
        let pic = picture();
        let a = clip.embed_image(&pic).unwrap();
        assert_eq!(a, clip.embed_image(&pic).unwrap());
        assert_ne!(a, dino.embed_image(&pic).unwrap());
        assert!(a.iter().any(|v| *v != 0.0));
        let text = MockTextEmbedder::new("clip-like");
        assert_eq!(text.embed_text("a bee").unwrap(), text.embed_text("A bee").unwrap());
        assert!(text.embed_text("").unwrap().iter().any(|v| *v != 0.0));
    }
}
