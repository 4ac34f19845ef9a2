use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{json_error, DataError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeptImage {
    pub image: CocoImage,
    pub annotation: CocoAnnotation,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CocoFilterResult {
    /// Single-annotation images, ascending by image id.
    pub kept: Vec<KeptImage>,
    /// Every other image id, ascending.
    pub excluded: Vec<u64>,
}

/// Keeps exactly the images carrying one annotation.
pub fn filter_single_annotation(json: &str) -> Result<CocoFilterResult, DataError> {
    if json.trim().is_empty() {
        return Ok(CocoFilterResult {
            kept: Vec::new(),
            excluded: Vec::new(),
        });
    }
    let file: CocoFile = serde_json::from_str(json).map_err(|e| json_error(json, &e))?;
    let mut images: BTreeMap<u64, CocoImage> = BTreeMap::new();
    for img in file.images {
        let id = img.id;
        if images.insert(id, img).is_some() {
            return Err(DataError::Coco(format!("duplicate image id {id}")));
        }
    }
    let mut per_image: HashMap<u64, Vec<CocoAnnotation>> = HashMap::new();
    for ann in file.annotations {
        if !images.contains_key(&ann.image_id) {
            return Err(DataError::Coco(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            )));
        }
        per_image.entry(ann.image_id).or_default().push(ann);
    }
    let names: HashMap<u64, String> = file.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (id, image) in images {
        match per_image.remove(&id) {
            Some(mut anns) if anns.len() == 1 => {
                let annotation = anns.pop().unwrap();
                kept.push(KeptImage {
                    category: names.get(&annotation.category_id).cloned(),
                    image,
                    annotation,
                });
            }
            _ => excluded.push(id),
        }
    }
    Ok(CocoFilterResult { kept, excluded })
}
