use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cache::ResponseCache;
use super::entities::LexiconExtractor;
use super::mock::{
    MockCaptioner, MockChat, MockEditor, MockGrounder, MockImageEmbedder, MockInpainter,
    MockTextEmbedder,
};
use super::remote::{picture_from_b64, picture_to_b64};
use super::{
    Backend, BackendError, Caption, CaptionBackend, ChatBackend, ChatRequest,
    ConditionedEditBackend, Detection, EntityBackend, GroundingBackend, ImageEmbedder,
    InpaintBackend, RawDetection, TextEmbedder,
};
use crate::imaging::Picture;
use crate::records::BoundingBox;

/// Smallest box the inpainter accepts: 32×32 pixels.
pub const DEFAULT_MIN_BOX_AREA: u64 = 32 * 32;

/// A backend response with the cache key it is stored under.
#[derive(Debug, Clone, PartialEq)]
pub struct Served<T> {
    pub value: T,
    pub cache_key: String,
    pub cached: bool,
    pub warnings: Vec<String>,
}

/// One backend per role plus the contracts every caller relies on.
#[derive(Clone)]
pub struct BackendSuite {
    pub llm: Arc<dyn ChatBackend>,
    pub captioner: Arc<dyn CaptionBackend>,
    pub extractor: Arc<dyn EntityBackend>,
    pub detector: Arc<dyn GroundingBackend>,
    pub inpainter: Arc<dyn InpaintBackend>,
    pub editor: Arc<dyn ConditionedEditBackend>,
    pub cache: Option<Arc<ResponseCache>>,
    pub min_box_area: u64,
}

#[derive(Serialize, Deserialize)]
struct StoredPicture {
    png_b64: String,
}

impl BackendSuite {
    /// Every role backed by its seeded mock. `captions` maps image content
    /// hashes to mock captions.
    pub fn mock(captions: BTreeMap<String, String>) -> Self {
        BackendSuite {
            llm: Arc::new(MockChat::default()),
            captioner: Arc::new(MockCaptioner::new(captions)),
            extractor: Arc::new(LexiconExtractor::default()),
            detector: Arc::new(MockGrounder::default()),
            inpainter: Arc::new(MockInpainter::default()),
            editor: Arc::new(MockEditor::default()),
            cache: None,
            min_box_area: DEFAULT_MIN_BOX_AREA,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Role name to backend version, for provenance and config hashing.
    pub fn versions(&self) -> BTreeMap<String, String> {
        let roles: [(&str, &dyn Backend); 6] = [
            ("llm", self.llm.as_ref() as &dyn Backend),
            ("captioner", self.captioner.as_ref() as &dyn Backend),
            ("extractor", self.extractor.as_ref() as &dyn Backend),
            ("detector", self.detector.as_ref() as &dyn Backend),
            ("inpainter", self.inpainter.as_ref() as &dyn Backend),
            ("editor", self.editor.as_ref() as &dyn Backend),
        ];
        roles
            .iter()
            .map(|(role, b)| (role.to_string(), format!("{}@{}", b.name(), b.version())))
            .collect()
    }

    pub fn version_of(&self, role: &str) -> String {
        self.versions().remove(role).unwrap_or_default()
    }

    fn cached<T, R, F>(
        &self,
        backend: &dyn Backend,
        operation: &str,
        request: &R,
        call: F,
    ) -> Result<Served<T>, BackendError>
    where
        T: Serialize + DeserializeOwned,
        R: Serialize,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let key = ResponseCache::key(backend.name(), backend.version(), operation, request);
        if let Some(value) = self.cache.as_ref().and_then(|c| c.get::<T>(&key)) {
            return Ok(Served {
                value,
                cache_key: key,
                cached: true,
                warnings: Vec::new(),
            });
        }
        let value = call()?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &value);
        }
        Ok(Served {
            value,
            cache_key: key,
            cached: false,
            warnings: Vec::new(),
        })
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<Served<String>, BackendError> {
        req.validate()?;
        let request = (&req.system_text, &req.user_text, req.temperature, req.seed);
        self.cached(self.llm.as_ref(), "chat", &request, || {
            let text = self.llm.chat(req)?;
            if text.trim().is_empty() {
                Err(BackendError::EmptyCompletion)
            } else {
                Ok(text)
            }
        })
    }

    pub fn caption(&self, image: &Picture) -> Result<Served<Caption>, BackendError> {
        let mut served = self.cached(self.captioner.as_ref(), "caption", &image.hash, || {
            let caption = self.captioner.caption(image)?;
            if caption.text.trim().is_empty() {
                return Err(BackendError::InvalidResponse("empty caption".into()));
            }
            Ok(caption)
        })?;
        if let Some(w) = &served.value.warning {
            served.warnings.push(w.clone());
        }
        Ok(served)
    }

    pub fn extract_entities(&self, caption: &str) -> Result<Served<Vec<String>>, BackendError> {
        if caption.trim().is_empty() {
            return Err(BackendError::Precondition("caption is empty".into()));
        }
        self.cached(self.extractor.as_ref(), "entities", &caption, || {
            self.extractor.extract_entities(caption)
        })
    }

    /// Detections clamped to the image, best first: highest score, then
    /// largest area, then top-most and left-most.
    pub fn ground(&self, image: &Picture, category: &str) -> Result<Served<Vec<Detection>>, BackendError> {
        if category.trim().is_empty() {
            return Err(BackendError::Precondition("category is empty".into()));
        }
        let raw: Served<Vec<RawDetection>> = self.cached(
            self.detector.as_ref(),
            "ground",
            &(&image.hash, category),
            || self.detector.ground(image, category),
        )?;
        let (width, height) = image.dims();
        let mut warnings = Vec::new();
        let mut detections = Vec::new();
        for det in &raw.value {
            match BoundingBox::clamped(det.coords, width, height) {
                Some((bbox, changed)) => {
                    if changed {
                        warnings.push(format!(
                            "detection {:?} for {category:?} clamped to image bounds {width}x{height}",
                            det.coords
                        ));
                    }
                    detections.push(Detection {
                        category: det.category.clone(),
                        bbox,
                        score: det.score.clamp(0.0, 1.0),
                    });
                }
                None => warnings.push(format!(
                    "detection {:?} for {category:?} lies outside the image and was dropped",
                    det.coords
                )),
            }
        }
        sort_detections(&mut detections);
        Ok(Served {
            value: detections,
            cache_key: raw.cache_key,
            cached: raw.cached,
            warnings,
        })
    }

    pub fn inpaint_replace(
        &self,
        image: &Picture,
        selected: &str,
        bbox: &BoundingBox,
        target: &str,
    ) -> Result<Served<Picture>, BackendError> {
        bbox.check_within(image.width(), image.height())
            .map_err(BackendError::Precondition)?;
        if bbox.area() < self.min_box_area {
            return Err(BackendError::DegenerateBox {
                area: bbox.area(),
                min: self.min_box_area,
            });
        }
        let stored = self.cached(
            self.inpainter.as_ref(),
            "inpaint",
            &(&image.hash, selected, bbox, target),
            || {
                let out = self.inpainter.inpaint_replace(image, selected, bbox, target)?;
                check_dims(image, &out)?;
                Ok(StoredPicture {
                    png_b64: picture_to_b64(&out)?,
                })
            },
        )?;
        unpack(stored, image)
    }

    pub fn conditioned_edit(&self, image: &Picture, instruction: &str) -> Result<Served<Picture>, BackendError> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Precondition("instruction is empty".into()));
        }
        let stored = self.cached(self.editor.as_ref(), "edit", &(&image.hash, instruction), || {
            let out = self.editor.conditioned_edit(image, instruction)?;
            check_dims(image, &out)?;
            Ok(StoredPicture {
                png_b64: picture_to_b64(&out)?,
            })
        })?;
        unpack(stored, image)
    }
}

fn check_dims(input: &Picture, output: &Picture) -> Result<(), BackendError> {
    if input.dims() != output.dims() {
        return Err(BackendError::DimensionMismatch {
            expected: input.dims(),
            got: output.dims(),
        });
    }
    Ok(())
}

fn unpack(stored: Served<StoredPicture>, input: &Picture) -> Result<Served<Picture>, BackendError> {
    let picture = picture_from_b64(&stored.value.png_b64)?;
    check_dims(input, &picture)?;
    Ok(Served {
        value: picture,
        cache_key: stored.cache_key,
        cached: stored.cached,
        warnings: stored.warnings,
    })
}

pub(crate) fn sort_detections(detections: &mut [Detection]) {
    detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.bbox.area().cmp(&a.bbox.area()))
            .then_with(|| (a.bbox.y_min, a.bbox.x_min).cmp(&(b.bbox.y_min, b.bbox.x_min)))
    });
}

/// The two embedder families used by the evaluation metrics.
#[derive(Clone)]
pub struct Embedders {
    pub clip_image: Arc<dyn ImageEmbedder>,
    pub clip_text: Arc<dyn TextEmbedder>,
    pub dino_image: Arc<dyn ImageEmbedder>,
}

impl Embedders {
    pub fn mock() -> Self {
        Embedders {
            clip_image: Arc::new(MockImageEmbedder::new("clip-like")),
            clip_text: Arc::new(MockTextEmbedder::new("clip-like")),
            dino_image: Arc::new(MockImageEmbedder::new("dino-like")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedChat;
    use image::{Rgb, RgbImage};

    struct WildGrounder;

    impl Backend for WildGrounder {
        fn name(&self) -> &str {
            "wild"
        }
        fn version(&self) -> &str {
            "1"
        }
    }

    impl GroundingBackend for WildGrounder {
        fn ground(&self, _: &Picture, category: &str) -> Result<Vec<RawDetection>, BackendError> {
            let d = |coords, score| RawDetection {
                category: category.into(),
                coords,
                score,
            };
            Ok(vec![
                d([10.0, 10.0, 20.0, 20.0], 0.5),
                d([-10.0, 5.0, 200.0, 40.0], 0.9),
                d([0.0, 0.0, 30.0, 30.0], 0.5),
                d([300.0, 300.0, 310.0, 310.0], 0.99),
            ])
        }
    }

    struct ShrinkingEditor;

    impl Backend for ShrinkingEditor {
        fn name(&self) -> &str {
            "shrink"
        }
        fn version(&self) -> &str {
            "1"
        }
    }

    impl ConditionedEditBackend for ShrinkingEditor {
        fn conditioned_edit(&self, image: &Picture, _: &str) -> Result<Picture, BackendError> {
            Ok(Picture::new(RgbImage::new(image.width() / 2, image.height())))
        }
    }

    fn picture() -> Picture {
        Picture::new(RgbImage::from_pixel(100, 80, Rgb([10, 20, 30])))
    }

    #[test]
    fn ground_clamps_flags_and_orders() {
        let mut suite = BackendSuite::mock(BTreeMap::new());
        suite.detector = Arc::new(WildGrounder);
        let served = suite.ground(&picture(), "cat").unwrap();
        let boxes: Vec<_> = served.value.iter().map(|d| d.bbox).collect();
        assert_eq!(
            boxes,
            vec![
                BoundingBox::new(0, 5, 100, 40).unwrap(),
                BoundingBox::new(0, 0, 30, 30).unwrap(),
                BoundingBox::new(10, 10, 20, 20).unwrap(),
            ]
        );
        assert_eq!(served.warnings.len(), 2);
    }

    #[test]
    fn editor_dimension_mismatch_is_rejected() {
        let mut suite = BackendSuite::mock(BTreeMap::new());
        suite.editor = Arc::new(ShrinkingEditor);
        assert!(matches!(
            suite.conditioned_edit(&picture(), "do it"),
            Err(BackendError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_box_is_rejected_before_the_call() {
        let suite = BackendSuite::mock(BTreeMap::new());
        let small = BoundingBox::new(0, 0, 31, 32).unwrap();
        assert_eq!(
            suite.inpaint_replace(&picture(), "cat", &small, "dog"),
            Err(BackendError::DegenerateBox { area: 992, min: 1024 })
        );
        let ok = BoundingBox::new(0, 0, 32, 32).unwrap();
        assert!(suite.inpaint_replace(&picture(), "cat", &ok, "dog").is_ok());
    }

    #[test]
    fn cache_hits_skip_the_backend() {
        let chat = Arc::new(ScriptedChat::new(["first", "second"]));
        let mut suite = BackendSuite::mock(BTreeMap::new()).with_cache(Arc::new(ResponseCache::in_memory()));
        suite.llm = chat.clone();
        let req = ChatRequest::new("s", "u");
        let a = suite.chat(&req).unwrap();
        let b = suite.chat(&req).unwrap();
        assert_eq!(a.value, "first");
        assert_eq!(b.value, "first");
        assert!(!a.cached && b.cached);
        assert_eq!(a.cache_key, b.cache_key);
        assert_eq!(chat.calls(), 1);
    }

    #[test]
    fn cached_inpaint_round_trips_pixels() {
        let suite = BackendSuite::mock(BTreeMap::new()).with_cache(Arc::new(ResponseCache::in_memory()));
        let bbox = BoundingBox::new(10, 10, 60, 60).unwrap();
        let a = suite.inpaint_replace(&picture(), "cat", &bbox, "dog").unwrap();
        let b = suite.inpaint_replace(&picture(), "cat", &bbox, "dog").unwrap();
        assert!(b.cached);
        assert_eq!(a.value, b.value);
    }
}
