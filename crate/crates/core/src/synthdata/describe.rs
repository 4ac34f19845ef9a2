use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::lexicon::NegationLexicon;
use super::scene::{Color, ObjectState, SceneObject, SceneSpec, CELL_PHRASES};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Color,
    Position,
    State,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Color, Attribute::Position, Attribute::State];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Color => "Color",
            Attribute::Position => "Position",
            Attribute::State => "State",
        }
    }
}

/// Truth value × logical form of a description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "P+")]
    PPos,
    #[serde(rename = "P-")]
    PNeg,
    #[serde(rename = "N+")]
    NPos,
    #[serde(rename = "N-")]
    NNeg,
}

impl Polarity {
    pub const ALL: [Polarity; 4] = [Polarity::PPos, Polarity::PNeg, Polarity::NPos, Polarity::NNeg];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::PPos => "P+",
            Polarity::PNeg => "P-",
            Polarity::NPos => "N+",
            Polarity::NNeg => "N-",
        }
    }

    /// Whether the phrase is phrased with a negation word.
    pub fn is_negated(self) -> bool {
        matches!(self, Polarity::NPos | Polarity::NNeg)
    }

    /// Whether the phrase is true of the target.
    pub fn is_true(self) -> bool {
        matches!(self, Polarity::PPos | Polarity::NPos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DescriptionKey {
    pub attribute: Attribute,
    pub polarity: Polarity,
}

impl DescriptionKey {
    pub const fn new(attribute: Attribute, polarity: Polarity) -> Self {
        Self { attribute, polarity }
    }

    /// All twelve keys in canonical order.
    pub fn all() -> impl Iterator<Item = DescriptionKey> {
        Attribute::ALL
            .into_iter()
            .flat_map(|a| Polarity::ALL.into_iter().map(move |p| DescriptionKey::new(a, p)))
    }
}

impl fmt::Display for DescriptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.attribute.as_str(), self.polarity.as_str())
    }
}

impl FromStr for DescriptionKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DescriptionKey::all()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown description key {s:?}"))
    }
}

impl Serialize for DescriptionKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DescriptionKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type Descriptions = BTreeMap<DescriptionKey, String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OppositionAnnotation {
    pub image_id: String,
    pub category: String,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
    pub descriptions: Descriptions,
}

impl OppositionAnnotation {
    pub fn get(&self, attribute: Attribute, polarity: Polarity) -> Option<&str> {
        self.descriptions
            .get(&DescriptionKey::new(attribute, polarity))
            .map(String::as_str)
    }

    /// Every violated invariant, as human-readable strings.
    pub fn violations(&self, lexicon: &NegationLexicon) -> Vec<String> {
        let mut out = Vec::new();
        for key in DescriptionKey::all() {
            match self.descriptions.get(&key) {
                None => out.push(format!("missing {key}")),
                Some(p) if p.trim().is_empty() => out.push(format!("empty {key}")),
                Some(p) => {
                    if lexicon.contains_negation(p) != key.polarity.is_negated() {
                        out.push(format!("polarity {key}"));
                    }
                }
            }
        }
        if self.descriptions.len() != 12 {
            out.push(format!("{} keys instead of 12", self.descriptions.len()));
        }
        for attr in Attribute::ALL {
            for (affirm, negated) in [(Polarity::PPos, Polarity::NNeg), (Polarity::PNeg, Polarity::NPos)] {
                if let (Some(a), Some(n)) = (self.get(attr, affirm), self.get(attr, negated)) {
                    if !negates(a, n, lexicon) {
                        out.push(format!(
                            "{}_{} does not negate {}_{}",
                            attr.as_str(),
                            negated.as_str(),
                            attr.as_str(),
                            affirm.as_str()
                        ));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, lexicon: &NegationLexicon) -> Result<(), DataError> {
        let v = self.violations(lexicon);
        if v.is_empty() {
            Ok(())
        } else {
            Err(DataError::Describe(format!("{}: {}", self.image_id, v.join("; "))))
        }
    }
}

/// Lexical negation check: equal token multisets once negation words are
/// removed, with negation words only on the `negated` side.
pub fn negates(affirmative: &str, negated: &str, lexicon: &NegationLexicon) -> bool {
    let strip = |s: &str| {
        let mut toks: Vec<String> = super::tokenize(s)
            .into_iter()
            .filter(|t| !lexicon.is_negation(t))
            .collect();
        toks.sort();
        toks
    };
    !lexicon.contains_negation(affirmative)
        && lexicon.contains_negation(negated)
        && strip(affirmative) == strip(negated)
}

fn phrase(attribute: Attribute, category: &str, value: &str, negated: bool) -> String {
    let not = if negated { "not " } else { "" };
    match attribute {
        Attribute::Color => format!("the {category} {not}in {value}"),
        Attribute::Position => format!("the {category} {not}at {value}"),
        Attribute::State => format!("the {category} that is {not}{value}"),
    }
}

fn attr_value(attribute: Attribute, obj: &SceneObject) -> String {
    match attribute {
        Attribute::Color => obj.color.name().to_string(),
        Attribute::Position => CELL_PHRASES[obj.position_cell as usize].to_string(),
        Attribute::State => obj.state.phrase().to_string(),
    }
}

fn value_domain(attribute: Attribute) -> Vec<String> {
    match attribute {
        Attribute::Color => Color::ALL.iter().map(|c| c.name().to_string()).collect(),
        Attribute::Position => CELL_PHRASES.iter().map(|s| s.to_string()).collect(),
        Attribute::State => ObjectState::ALL.iter().map(|s| s.phrase().to_string()).collect(),
    }
}

/// The false value used for P−: the one held by the same-category
/// distractors, so that N+ singles out the target among its category.
fn false_value(scene: &SceneSpec, attribute: Attribute) -> Result<String, DataError> {
    let target = attr_value(attribute, scene.target());
    let held: Vec<String> = scene
        .same_category_distractors()
        .map(|d| attr_value(attribute, d))
        .collect();
    if let Some(first) = held.first() {
        if held.iter().all(|v| v == first) && *first != target {
            return Ok(first.clone());
        }
    }
    let candidates: Vec<String> = value_domain(attribute).into_iter().filter(|v| *v != target).collect();
    if candidates.is_empty() {
        return Err(DataError::Describe(format!(
            "{} has a single possible value",
            attribute.as_str()
        )));
    }
    let pick = scene
        .scene_id
        .bytes()
        .fold(attribute as usize, |h, b| h.wrapping_mul(31).wrapping_add(b as usize));
    log::warn!(
        "{}: distractors do not share one {} value distinct from the target; N+ may not be unique",
        scene.scene_id,
        attribute.as_str()
    );
    Ok(candidates[pick % candidates.len()].clone())
}

/// The twelve opposition descriptions of the scene's target.
pub fn describe(scene: &SceneSpec) -> Result<OppositionAnnotation, DataError> {
    let target = scene
        .objects
        .get(scene.target_index)
        .ok_or_else(|| DataError::Describe(format!("{}: target index out of range", scene.scene_id)))?;
    let category = target.category.name();
    let mut descriptions = Descriptions::new();
    for attr in Attribute::ALL {
        let truth = attr_value(attr, target);
        let lie = false_value(scene, attr)?;
        for (polarity, value, negated) in [
            (Polarity::PPos, &truth, false),
            (Polarity::PNeg, &lie, false),
            (Polarity::NPos, &lie, true),
            (Polarity::NNeg, &truth, true),
        ] {
            descriptions.insert(
                DescriptionKey::new(attr, polarity),
                phrase(attr, category, value, negated),
            );
        }
    }
    Ok(OppositionAnnotation {
        image_id: scene.scene_id.clone(),
        category: category.to_string(),
        bbox: target.bbox.to_array(),
        descriptions,
    })
}

/// Key-value record in the interchange format (a JSON object).
pub fn serialize_descriptions(descriptions: &Descriptions) -> String {
    serde_json::to_string_pretty(descriptions).expect("string map serializes")
}
