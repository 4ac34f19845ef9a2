use serde::{Deserialize, Serialize};

use super::GoblError;
use crate::synthdata::describe::negates;
use crate::synthdata::{Attribute, NegationLexicon, OppositionAnnotation, Polarity};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub phrase: String,
    pub polarity: Polarity,
}

/// Which member of a group plays the positive-logic feature in TSO.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsoRole {
    TruePrompt,
    FalsePrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OppositionGroup {
    pub image_id: String,
    pub attribute: Attribute,
    pub true_prompt: Prompt,
    pub false_prompt: Prompt,
    pub tso_pair_role: TsoRole,
    /// `(x, y, w, h)` in pixels.
    pub gt_box: [f64; 4],
}

impl OppositionGroup {
    /// E.g. `Color:P+/N-`.
    pub fn key(&self) -> String {
        format!(
            "{}:{}/{}",
            self.attribute.as_str(),
            self.true_prompt.polarity.as_str(),
            self.false_prompt.polarity.as_str()
        )
    }

    /// Checks the pairing rule and the lexical negation rule.
    pub fn check(&self, lexicon: &NegationLexicon) -> Result<(), String> {
        use Polarity::*;
        let (t, f) = (self.true_prompt.polarity, self.false_prompt.polarity);
        let (affirmative, negated, role) = match (t, f) {
            (PPos, NNeg) => (&self.true_prompt.phrase, &self.false_prompt.phrase, TsoRole::TruePrompt),
            (NPos, PNeg) => (
                &self.false_prompt.phrase,
                &self.true_prompt.phrase,
                TsoRole::FalsePrompt,
            ),
            _ => return Err(format!("invalid pairing {}", self.key())),
        };
        if self.tso_pair_role != role {
            return Err(format!("{}: wrong TSO role", self.key()));
        }
        if !negates(affirmative, negated, lexicon) {
            return Err(format!("{}: {negated:?} does not negate {affirmative:?}", self.key()));
        }
        Ok(())
    }
}

/// Up to six opposition groups, ordered by attribute then `(P+, N−)`, `(N+, P−)`.
pub fn build_groups(
    annotation: &OppositionAnnotation,
    lexicon: &NegationLexicon,
) -> Result<Vec<OppositionGroup>, GoblError> {
    use Polarity::*;
    let mut out = Vec::with_capacity(6);
    for attribute in Attribute::ALL {
        for (tp, fp, role) in [(PPos, NNeg, TsoRole::TruePrompt), (NPos, PNeg, TsoRole::FalsePrompt)] {
            let (Some(t), Some(f)) = (annotation.get(attribute, tp), annotation.get(attribute, fp)) else {
                continue;
            };
            let group = OppositionGroup {
                image_id: annotation.image_id.clone(),
                attribute,
                true_prompt: Prompt {
                    phrase: t.to_string(),
                    polarity: tp,
                },
                false_prompt: Prompt {
                    phrase: f.to_string(),
                    polarity: fp,
                },
                tso_pair_role: role,
                gt_box: annotation.bbox,
            };
            match group.check(lexicon) {
                Ok(()) => out.push(group),
                Err(e) => log::warn!("{}: skipping group: {e}", annotation.image_id),
            }
        }
    }
    if out.is_empty() {
        return Err(GoblError::NoGroups(annotation.image_id.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{describe, generate_scene, DescriptionKey, SceneConfig};

    fn annotation(seed: u64) -> OppositionAnnotation {
        describe(&generate_scene(seed, &SceneConfig::default()).unwrap()).unwrap()
    }

    #[test]
    fn six_groups_from_full_annotation() {
        let lex = NegationLexicon::default();
        let g = build_groups(&annotation(0), &lex).unwrap();
        assert_eq!(g.len(), 6);
        let keys: Vec<String> = g.iter().map(OppositionGroup::key).collect();
        assert_eq!(keys[0], "Color:P+/N-");
        assert_eq!(keys[1], "Color:N+/P-");
        assert_eq!(keys[5], "State:N+/P-");
    }

    #[test]
    fn color_only_annotation_gives_two() {
        let lex = NegationLexicon::default();
        let mut a = annotation(1);
        a.descriptions.retain(|k, _| k.attribute == Attribute::Color);
        assert_eq!(build_groups(&a, &lex).unwrap().len(), 2);
        a.descriptions.clear();
        assert!(matches!(build_groups(&a, &lex), Err(GoblError::NoGroups(_))));
    }

    #[test]
    fn lexical_failures_are_skipped() {
        let lex = NegationLexicon::default();
        let mut a = annotation(2);
        a.descriptions.insert(
            DescriptionKey::new(Attribute::State, Polarity::NNeg),
            "the cat not in black".into(),
        );
        assert_eq!(build_groups(&a, &lex).unwrap().len(), 5);
    }
}
