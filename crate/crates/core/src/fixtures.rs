//! Deterministic synthetic corpora for offline runs, tests and demos.
//!
//! Images are procedurally drawn scenes (gradient background plus a few
//! shapes) keyed by a seed, so every file is byte-identical across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hashing::hash_u64;
use crate::imaging::{content_hash, encode_png, Picture};
use crate::pipeline::{Corpus, PipelineError, SourcePair};
use crate::records::{
    BoundingBox, EditSample, ImageRef, Part, ProvenanceRecord, ReplacementRecord, SourceDataset,
};

pub const FIXTURE_IMAGE_SIZE: u32 = 128;
pub const BUTTERFLY_CAPTION: &str = "a butterfly on a flower";

/// (input caption, instruction, edited caption) for the paired sources.
const PAIR_SCENES: &[(&str, &str, &str)] = &[
    ("photo of fruits", "turn fruits to a cake", "photo of a cake"),
    ("a cat sitting on a chair", "make the cat a dog", "a dog sitting on a chair"),
    ("a red car near a tree", "turn the car into a bus", "a red bus near a tree"),
    ("a bird above a boat", "replace the bird with an airplane", "an airplane above a boat"),
    ("a horse in a field", "make it a zebra", "a zebra in a field"),
    ("a cup on a table", "turn the cup into a bowl", "a bowl on a table"),
    ("a clock on the wall", "change the clock to a calendar", "a calendar on the wall"),
    ("a lamp beside a sofa", "replace the lamp with a candle", "a candle beside a sofa"),
    ("an apple on a plate", "make the apple an orange", "an orange on a plate"),
    ("a bicycle by a house", "turn the bicycle into a motorcycle", "a motorcycle by a house"),
];

/// Captions of the image-only sources. The caption table maps each image
/// hash to one of these.
const IMAGE_SCENES: &[&str] = &[
    BUTTERFLY_CAPTION,
    "a dog next to a car",
    "a cat under a tree",
    "an apple and a banana on a table",
    "a boat near a house",
    "a horse beside a tree",
    "a cup next to a clock",
    "a bird on a bicycle",
    "a lamp on a chair",
    "a flower in a cup",
    "a statue in a garden",
    "the the the",
];

fn lerp(a: u8, b: u8, t: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * t).round() as u8
}

/// A synthetic scene: vertical gradient background and 2 to 4 rectangles
/// and discs.
pub fn scene_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [u8; 3] = rng.gen();
    let bottom: [u8; 3] = rng.gen();
    let mut img = RgbImage::from_fn(size, size, |_, y| {
        let t = y as f64 / (size.max(2) - 1) as f64;
        Rgb([lerp(top[0], bottom[0], t), lerp(top[1], bottom[1], t), lerp(top[2], bottom[2], t)])
    });
    let shapes = rng.gen_range(2..=4);
    for _ in 0..shapes {
        let color = Rgb(rng.gen::<[u8; 3]>());
        let w = rng.gen_range(size / 8..=size / 3).max(1);
        let h = rng.gen_range(size / 8..=size / 3).max(1);
        let x0 = rng.gen_range(0..size - w);
        let y0 = rng.gen_range(0..size - h);
        let disc = rng.gen_bool(0.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let inside = !disc || {
                    let dx = (x - x0) as f64 / w as f64 - 0.5;
                    let dy = (y - y0) as f64 / h as f64 - 0.5;
                    dx * dx + dy * dy <= 0.25
                };
                if inside {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

/// The scene paired with `scene_image(seed)` after an edit: the same
/// background with a recolored central object.
pub fn edited_scene_image(seed: u64, size: u32) -> RgbImage {
    let mut img = scene_image(seed, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ed17);
    let color = Rgb(rng.gen::<[u8; 3]>());
    let (lo, hi) = (size / 4, size - size / 4);
    for y in lo..hi {
        for x in lo..hi {
            if (x + y) % 7 != 0 {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

/// A butterfly-like shape over a flower on a green background.
pub fn butterfly_image(size: u32) -> RgbImage {
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 / s, y as f64 / s);
        let wing = |cx: f64, cy: f64| ((fx - cx) / 0.12).powi(2) + ((fy - cy) / 0.09).powi(2) <= 1.0;
        if wing(0.38, 0.30) || wing(0.62, 0.30) {
            Rgb([230, 140, 20])
        } else if (fx - 0.5).abs() < 0.015 && (0.22..0.40).contains(&fy) {
            Rgb([30, 20, 10])
        } else if ((fx - 0.5).powi(2) + (fy - 0.70).powi(2)).sqrt() < 0.10 {
            Rgb([220, 40, 120])
        } else if (fx - 0.5).abs() < 0.02 && fy > 0.78 {
            Rgb([20, 120, 30])
        } else {
            Rgb([120, 190, 110])
        }
    })
}

fn image_only_picture(index: usize) -> RgbImage {
    if index == 0 {
        butterfly_image(FIXTURE_IMAGE_SIZE)
    } else {
        scene_image(hash_u64(&[b"image-only", &(index as u64).to_le_bytes()]), FIXTURE_IMAGE_SIZE)
    }
}

/// Caption of the `index`-th image-only fixture source, `None` for the one
/// source deliberately missing from the caption table.
fn image_only_caption(index: usize, n_images: usize) -> Option<&'static str> {
    if n_images > 1 && index == n_images - 1 {
        return None;
    }
    Some(IMAGE_SCENES[index % IMAGE_SCENES.len()])
}

/// Content hash → caption for the image-only fixture sources, used by the
/// mock captioner.
pub fn fixture_caption_table() -> BTreeMap<String, String> {
    caption_table(STANDARD_IMAGES)
}

fn caption_table(n_images: usize) -> BTreeMap<String, String> {
    (0..n_images)
        .filter_map(|i| image_only_caption(i, n_images).map(|c| (content_hash(&image_only_picture(i)), c.to_string())))
        .collect()
}

/// Caption table written next to a fixture corpus for the mock captioner.
pub const MOCK_CAPTIONS_FILE: &str = "mock-captions.json";

pub const STANDARD_PAIRS: usize = 30;
pub const STANDARD_IMAGES: usize = 20;

fn save(dir: &Path, rel: &str, img: &RgbImage) -> Result<ImageRef, PipelineError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let bytes = encode_png(img)?;
    fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
    Ok(Picture::new(img.clone()).reference(rel))
}

/// Writes the standard 50-source fixture corpus (30 pairs, 20 image-only
/// sources) under `dir` and returns it.
///
/// Pairs 5, 15 and 25 have identical input and edited images. The last
/// image-only source is absent from [`fixture_caption_table`] and one
/// caption has no extractable categories.
pub fn write_fixture_corpus(dir: &Path) -> Result<Corpus, PipelineError> {
    write_corpus(dir, STANDARD_PAIRS, STANDARD_IMAGES)
}

/// Like [`write_fixture_corpus`] with custom sizes.
pub fn write_corpus(dir: &Path, n_pairs: usize, n_images: usize) -> Result<Corpus, PipelineError> {
    let mut sources = Vec::new();
    for i in 0..n_pairs {
        let seed = hash_u64(&[b"pair", &(i as u64).to_le_bytes()]);
        let id = format!("pair-{i:03}");
        let (input_caption, instruction, edited_caption) = PAIR_SCENES[i % PAIR_SCENES.len()];
        let input = scene_image(seed, FIXTURE_IMAGE_SIZE);
        let edited = if i % 10 == 5 {
            input.clone()
        } else {
            edited_scene_image(seed, FIXTURE_IMAGE_SIZE)
        };
        sources.push(SourcePair {
            input_image: save(dir, &format!("images/{id}_0.png"), &input)?,
            edited_image: Some(save(dir, &format!("images/{id}_1.png"), &edited)?),
            source_id: id,
            input_caption: Some(input_caption.to_string()),
            edited_caption: Some(edited_caption.to_string()),
            original_instruction: Some(instruction.to_string()),
        });
    }
    for i in 0..n_images {
        let id = format!("image-{i:03}");
        let image = save(dir, &format!("images/{id}.png"), &image_only_picture(i))?;
        sources.push(SourcePair::image_only(id, image));
    }
    let corpus = Corpus::new(SourceDataset::Fixture, dir, sources);
    corpus.save()?;
    let table = serde_json::to_string_pretty(&caption_table(n_images)).expect("caption table serializes");
    let path = dir.join(MOCK_CAPTIONS_FILE);
    fs::write(&path, table).map_err(|e| PipelineError::io(&path, e))?;
    Ok(corpus)
}

/// Caption table matching a corpus written by [`write_corpus`].
pub fn corpus_caption_table(n_images: usize) -> BTreeMap<String, String> {
    caption_table(n_images)
}

/// Captioned single-image sources for benchmark construction: `n` scenes
/// whose captions name objects the mock grounder knows.
pub fn write_benchmark_corpus(dir: &Path, n: usize) -> Result<Corpus, PipelineError> {
    let captions = &IMAGE_SCENES[..10];
    let mut sources = Vec::new();
    for i in 0..n {
        let id = format!("test-{i:04}");
        let img = scene_image(hash_u64(&[b"benchmark", &(i as u64).to_le_bytes()]), FIXTURE_IMAGE_SIZE);
        let mut source = SourcePair::image_only(id.clone(), save(dir, &format!("images/{id}.png"), &img)?);
        source.input_caption = Some(captions[i % captions.len()].to_string());
        sources.push(source);
    }
    let corpus = Corpus::new(SourceDataset::Fixture, dir, sources);
    corpus.save()?;
    Ok(corpus)
}

/// `n` valid records cycling through the three parts. No image files are
/// written; paths and hashes are synthetic.
pub fn sample_records(n: usize) -> Vec<EditSample> {
    (0..n)
        .map(|i| {
            let part = Part::ALL[i % 3];
            let source_id = format!("src-{i:03}");
            let id = format!("{source_id}-{}", part.suffix());
            let image = |name: &str| ImageRef {
                path: format!("images/{id}/{name}.png"),
                width: 64 + (i as u32 % 5) * 16,
                height: 48 + (i as u32 % 3) * 16,
                content_hash: crate::hashing::sha256_hex(format!("{id}/{name}").as_bytes()),
            };
            let (input_image, edited_image) = (image("input"), image("edited"));
            let mut versions = BTreeMap::from([("llm".to_string(), "mock-chat@mock-chat-1".to_string())]);
            let scene = PAIR_SCENES[i % PAIR_SCENES.len()];
            let replacement = (part != Part::PartI).then(|| {
                for role in ["extractor", "detector", "inpainter"] {
                    versions.insert(role.to_string(), format!("mock-{role}@1"));
                }
                ReplacementRecord {
                    selected_category: "butterfly".into(),
                    target_category: "bee".into(),
                    selected_box: BoundingBox::new(4, 4, 40, 36).expect("valid box"),
                    candidate_categories: vec!["butterfly".into(), "flower".into()],
                }
            });
            let (edited_caption, direct) = match part {
                Part::PartI => (Some(scene.2.to_string()), Some(scene.1.to_string())),
                _ => (None, None),
            };
            EditSample {
                id,
                input_image,
                edited_image,
                input_caption: Some(scene.0.to_string()),
                edited_caption,
                direct_instruction: direct,
                reasoning_instruction: format!("Sample {i}: something else should be here, with \"quotes\" and unicode \u{00e9}."),
                part,
                provenance: ProvenanceRecord {
                    source_dataset: SourceDataset::Fixture,
                    source_id,
                    generator_versions: versions,
                    seed: i as u64 * 7919,
                    settings: BTreeMap::from([("box_padding".to_string(), "0.05".to_string())]),
                    replacement,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        assert_eq!(scene_image(3, 32), scene_image(3, 32));
        assert_ne!(scene_image(3, 32), scene_image(4, 32));
        assert_ne!(scene_image(3, 32), edited_scene_image(3, 32));
    }

    #[test]
    fn caption_table_covers_all_but_one_image() {
        let table = fixture_caption_table();
        assert_eq!(table.len(), STANDARD_IMAGES - 1);
        let butterfly = content_hash(&butterfly_image(FIXTURE_IMAGE_SIZE));
        assert_eq!(table[&butterfly], BUTTERFLY_CAPTION);
    }

    #[test]
    fn sample_records_are_valid() {
        for sample in sample_records(50) {
            sample.validate().unwrap();
        }
    }
}
