use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scalar::Scalar;
use crate::types::{CategoryId, VerbId};

use super::{Entity, HoiSample, Interaction};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    file_name: String,
    width: f64,
    height: f64,
    hois: Vec<HoiRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HoiRecord {
    human_box: [f64; 4],
    object_box: [f64; 4],
    object: String,
    verb: String,
}

fn find(names: &[String], name: &str) -> Option<usize> {
    names.iter().position(|n| n == name)
}

fn intern<T: Scalar>(entities: &mut Vec<Entity<T>>, bbox: BoundingBox<T>, category: CategoryId) -> usize {
    match entities.iter().position(|e| e.bbox == bbox && e.category == category) {
        Some(i) => i,
        None => {
            entities.push(Entity { bbox, category });
            entities.len() - 1
        }
    }
}

fn to_sample<T: Scalar>(index: usize, r: Record, objects: &[String], verbs: &[String]) -> Result<HoiSample<T>> {
    let bad = |message: String| Error::MalformedRecord { index, message };
    if !(r.width > 0.0 && r.height > 0.0 && r.width.is_finite() && r.height.is_finite()) {
        return Err(bad(format!("image size {}x{}", r.width, r.height)));
    }
    let mut entities = Vec::new();
    let mut interactions = Vec::new();
    for h in r.hois {
        let object = find(objects, &h.object).ok_or_else(|| Error::UnknownObject(h.object.clone()))?;
        let verb = find(verbs, &h.verb).ok_or_else(|| Error::UnknownVerb(h.verb.clone()))?;
        let hb = BoundingBox::from_f64(h.human_box).map_err(|e| bad(e.to_string()))?;
        let ob = BoundingBox::from_f64(h.object_box).map_err(|e| bad(e.to_string()))?;
        let human = intern(&mut entities, hb, CategoryId::PERSON);
        let object = intern(&mut entities, ob, CategoryId(object));
        if human == object {
            return Err(bad("human and object are the same box".into()));
        }
        interactions.push(Interaction { human, object, verb: VerbId(verb) });
    }
    let sample = HoiSample {
        image_id: r.file_name,
        width: T::of(r.width),
        height: T::of(r.height),
        entities,
        interactions,
        raster: None,
    };
    sample.validate(verbs.len()).map_err(|e| bad(e.to_string()))?;
    Ok(sample)
}

/// Parses line-delimited records; blank lines are skipped. `objects[0]`
/// must be the person class.
pub fn parse_hico<T: Scalar>(text: &str, objects: &[String], verbs: &[String]) -> Result<Vec<HoiSample<T>>> {
    if objects.first().map(String::as_str) != Some("person") {
        return Err(Error::InvalidArgument("object vocabulary must start with \"person\"".into()));
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord { index: i, message: e.to_string() })?;
        out.push(to_sample(i, rec, objects, verbs)?);
    }
    Ok(out)
}

pub fn load_hico<T: Scalar>(path: &Path, objects: &[String], verbs: &[String]) -> Result<Vec<HoiSample<T>>> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_hico(&text, objects, verbs)
}

/// Serializes samples in the same line-delimited format.
pub fn write_hico<T: Scalar, W: Write>(
    samples: &[HoiSample<T>],
    objects: &[String],
    verbs: &[String],
    mut out: W,
) -> Result<()> {
    for s in samples {
        let hois = s
            .interactions
            .iter()
            .map(|it| {
                let o = &s.entities[it.object];
                Ok(HoiRecord {
                    human_box: s.entities[it.human].bbox.to_f64(),
                    object_box: o.bbox.to_f64(),
                    object: objects
                        .get(o.category.0)
                        .ok_or_else(|| Error::UnknownObject(format!("{:?}", o.category)))?
                        .clone(),
                    verb: verbs.get(it.verb.0).ok_or_else(|| Error::UnknownVerb(it.verb.to_string()))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = Record { file_name: s.image_id.clone(), width: s.width.as_f64(), height: s.height.as_f64(), hois };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_hico<T: Scalar>(samples: &[HoiSample<T>], objects: &[String], verbs: &[String], path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_hico(samples, objects, verbs, file)
}
