//! HTTP clients for the remote model services.
//!
//! | role        | request                                             | response                                   |
//! |-------------|-----------------------------------------------------|--------------------------------------------|
//! | chat        | `POST /v1/chat/completions {model, messages, temperature, seed}` | `choices[0].message.content` |
//! | caption     | `POST /caption {image_b64}`                          | `{caption}`                                |
//! | entities    | `POST /entities {text}`                              | `{entities: [string]}`                     |
//! | grounding   | `POST /ground {image_b64, phrase}`                   | `{detections: [{box: [x0,y0,x1,y1], score}]}` |
//! | inpaint     | `POST /inpaint {image_b64, box, selected, target}`   | `{image_b64}`                              |
//! | edit        | `POST /edit {image_b64, instruction}`                | `{image_b64}`                              |
//! | image embed | `POST /embed/image {image_b64}`                      | `{embedding: [number]}`                    |
//! | text embed  | `POST /embed/text {text}`                            | `{embedding: [number]}`                    |
//!
//! Images travel as standard base64 of a PNG encoding.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::http::{EndpointConfig, HttpTransport};
use super::{
    Backend, BackendError, Caption, CaptionBackend, ChatBackend, ChatRequest,
    ConditionedEditBackend, EntityBackend, GroundingBackend, ImageEmbedder, InpaintBackend,
    RawDetection, TextEmbedder,
};
use crate::imaging::{decode_rgb_bytes, encode_png, Picture};
use crate::records::BoundingBox;

pub fn picture_to_b64(picture: &Picture) -> Result<String, BackendError> {
    Ok(STANDARD.encode(encode_png(&picture.rgb)?))
}

pub fn picture_from_b64(data: &str) -> Result<Picture, BackendError> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| BackendError::InvalidResponse(format!("bad base64 image: {e}")))?;
    Ok(Picture::new(decode_rgb_bytes(&bytes)?))
}

fn field<'a>(value: &'a Value, name: &str) -> Result<&'a Value, BackendError> {
    value
        .get(name)
        .ok_or_else(|| BackendError::InvalidResponse(format!("missing field {name:?}")))
}

fn string_field(value: &Value, name: &str) -> Result<String, BackendError> {
    field(value, name)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| BackendError::InvalidResponse(format!("field {name:?} is not a string")))
}

fn vector_field(value: &Value, name: &str) -> Result<Vec<f64>, BackendError> {
    field(value, name)?
        .as_array()
        .and_then(|items| items.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| BackendError::InvalidResponse(format!("field {name:?} is not a number array")))
}

macro_rules! remote_backend {
    ($ty:ident, $name:literal) => {
        #[derive(Debug)]
        pub struct $ty {
            transport: HttpTransport,
            version: String,
        }

        impl $ty {
            pub fn new(endpoint: EndpointConfig, version: impl Into<String>) -> Result<Self, BackendError> {
                Ok($ty {
                    transport: HttpTransport::new(endpoint)?,
                    version: version.into(),
                })
            }

            pub fn transport(&self) -> &HttpTransport {
                &self.transport
            }
        }

        impl Backend for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn version(&self) -> &str {
                &self.version
            }
        }
    };
}

/// Client for any chat-completions compatible gateway.
#[derive(Debug)]
pub struct RemoteChat {
    transport: HttpTransport,
    model: String,
    version: String,
}

impl RemoteChat {
    pub fn new(endpoint: EndpointConfig, model: impl Into<String>) -> Result<Self, BackendError> {
        let model = model.into();
        Ok(RemoteChat {
            transport: HttpTransport::new(endpoint)?,
            version: format!("chat:{model}"),
            model,
        })
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !req.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_text}));
        }
        messages.push(json!({"role": "user", "content": req.user_text}));
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "seed": req.seed,
        })
    }
}

impl Backend for RemoteChat {
    fn name(&self) -> &str {
        "remote-chat"
    }

    fn version(&self) -> &str {
        &self.version
    }
}

impl ChatBackend for RemoteChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate()?;
        let response = self
            .transport
            .post_json("/v1/chat/completions", &self.request_body(req))?;
        let content = response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::InvalidResponse("missing choices[0].message.content".into()))?;
        if content.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(content.to_string())
    }
}

remote_backend!(RemoteCaptioner, "remote-captioner");

impl CaptionBackend for RemoteCaptioner {
    fn caption(&self, image: &Picture) -> Result<Caption, BackendError> {
        let response = self
            .transport
            .post_json("/caption", &json!({"image_b64": picture_to_b64(image)?}))?;
        let text = string_field(&response, "caption")?;
        if text.trim().is_empty() {
            return Err(BackendError::InvalidResponse("empty caption".into()));
        }
        Ok(Caption {
            text: text.trim().to_string(),
            warning: None,
        })
    }
}

remote_backend!(RemoteEntities, "remote-ner");

impl EntityBackend for RemoteEntities {
    fn extract_entities(&self, caption: &str) -> Result<Vec<String>, BackendError> {
        if caption.trim().is_empty() {
            return Err(BackendError::Precondition("caption is empty".into()));
        }
        let response = self.transport.post_json("/entities", &json!({"text": caption}))?;
        let items = field(&response, "entities")?
            .as_array()
            .ok_or_else(|| BackendError::InvalidResponse("entities is not an array".into()))?;
        let mut out: Vec<String> = Vec::new();
        for item in items {
            let entity = item
                .as_str()
                .ok_or_else(|| BackendError::InvalidResponse("entity is not a string".into()))?
                .trim()
                .to_lowercase();
            if !entity.is_empty() && !out.contains(&entity) {
                out.push(entity);
            }
        }
        Ok(out)
    }
}

remote_backend!(RemoteGrounder, "remote-grounder");

impl GroundingBackend for RemoteGrounder {
    fn ground(&self, image: &Picture, category: &str) -> Result<Vec<RawDetection>, BackendError> {
        let response = self.transport.post_json(
            "/ground",
            &json!({"image_b64": picture_to_b64(image)?, "phrase": category}),
        )?;
        let items = field(&response, "detections")?
            .as_array()
            .ok_or_else(|| BackendError::InvalidResponse("detections is not an array".into()))?;
        items
            .iter()
            .map(|item| {
                let coords = vector_field(item, "box")?;
                let coords: [f64; 4] = coords
                    .try_into()
                    .map_err(|_| BackendError::InvalidResponse("box needs four numbers".into()))?;
                let score = field(item, "score")?
                    .as_f64()
                    .ok_or_else(|| BackendError::InvalidResponse("score is not a number".into()))?;
                Ok(RawDetection {
                    category: category.to_string(),
                    coords,
                    score,
                })
            })
            .collect()
    }
}

remote_backend!(RemoteInpainter, "remote-inpainter");

impl InpaintBackend for RemoteInpainter {
    fn inpaint_replace(
        &self,
        image: &Picture,
        selected: &str,
        bbox: &BoundingBox,
        target: &str,
    ) -> Result<Picture, BackendError> {
        let response = self.transport.post_json(
            "/inpaint",
            &json!({
                "image_b64": picture_to_b64(image)?,
                "box": [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
                "selected": selected,
                "target": target,
            }),
        )?;
        picture_from_b64(&string_field(&response, "image_b64")?)
    }
}

remote_backend!(RemoteEditor, "remote-editor");

impl ConditionedEditBackend for RemoteEditor {
    fn conditioned_edit(&self, image: &Picture, instruction: &str) -> Result<Picture, BackendError> {
        let response = self.transport.post_json(
            "/edit",
            &json!({"image_b64": picture_to_b64(image)?, "instruction": instruction}),
        )?;
        picture_from_b64(&string_field(&response, "image_b64")?)
    }
}

remote_backend!(RemoteImageEmbedder, "remote-image-embedder");

impl ImageEmbedder for RemoteImageEmbedder {
    fn embed_image(&self, image: &Picture) -> Result<Vec<f64>, BackendError> {
        let response = self
            .transport
            .post_json("/embed/image", &json!({"image_b64": picture_to_b64(image)?}))?;
        vector_field(&response, "embedding")
    }
}

remote_backend!(RemoteTextEmbedder, "remote-text-embedder");

impl TextEmbedder for RemoteTextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let response = self.transport.post_json("/embed/text", &json!({"text": text}))?;
        vector_field(&response, "embedding")
    }
}
