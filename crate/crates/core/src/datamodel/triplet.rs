use rand::seq::IndexedRandom;
use rand::Rng;

use super::{EmbeddingCache, Point, ShapeRecord};
use crate::error::{Error, Result};

/// One training triplet: a shape's points plus one text and one image vector
/// copied verbatim from the frozen cache.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub shape_id: String,
    pub points: Vec<Point>,
    pub text_vector: Vec<f32>,
    pub image_vector: Vec<f32>,
}

/// Draws a text source category uniformly among the non-empty ones, then a
/// candidate uniformly within it, then an image view uniformly.
///
/// Returns [`Error::TextLess`] when the record has no text candidates at all.
pub fn assemble_triplet<R: Rng + ?Sized>(
    record: &ShapeRecord,
    cache: &EmbeddingCache,
    rng: &mut R,
) -> Result<TripletSample> {
    let text_key = pick_text_key(record, rng)?;
    let view_key = record.image_view_keys.choose(rng).ok_or_else(|| Error::InvalidRecord {
        id: record.id.clone(),
        reason: "no image view keys".into(),
    })?;
    let text_vector = cache.text(text_key).ok_or_else(|| Error::DanglingKey {
        record: record.id.clone(),
        kind: "text",
        key: text_key.to_string(),
    })?;
    let image_vector = cache.image(view_key).ok_or_else(|| Error::DanglingKey {
        record: record.id.clone(),
        kind: "image view",
        key: view_key.clone(),
    })?;
    Ok(TripletSample {
        shape_id: record.id.clone(),
        points: record.points.clone(),
        text_vector: text_vector.to_vec(),
        image_vector: image_vector.to_vec(),
    })
}

pub(crate) fn pick_text_key<'a, R: Rng + ?Sized>(record: &'a ShapeRecord, rng: &mut R) -> Result<&'a str> {
    let categories: Vec<&Vec<String>> = record.text_candidates.values().filter(|v| !v.is_empty()).collect();
    let category = categories
        .choose(rng)
        .ok_or_else(|| Error::TextLess(record.id.clone()))?;
    Ok(category.choose(rng).expect("non-empty category"))
}

pub(crate) fn pick_view_key<'a, R: Rng + ?Sized>(record: &'a ShapeRecord, rng: &mut R) -> &'a str {
    record.image_view_keys.choose(rng).expect("validated record has a view")
}
