/// Instruction template sent to the annotating MLLM.
pub const INSTRUCTION: &str = "Please generate phrase labels that meet the following requirements for the objects in the bbox in the figure. Note: The format should strictly be a dictionary where each key corresponds to a specific attribute category, and the values should be appropriate descriptive phrases.

1. Format: Use dictionary format to return.

2. Example of expected format:
- Color_P+: \u{201c}The man in a red shirt\"
- Color_P-: \u{201c}The man in a blue shirt\"
- Color_N+: \u{201c}The man not in a blue shirt\"
- Color_N-: \u{201c}The man not in a red shirt\"
- Position_P+: \u{201c}The man holding the child\"
- Position_P-: \u{201c}The man beside the child\"
- Position_N+: \u{201c}The man not beside the child\"
- Position_N-: \u{201c}The man not holding the child\"
- State_P+: \u{201c}The standing man\"
- State_P-: \u{201c}The sitting man\"
- State_N+: \u{201c}The man not sitting\"
- State_N-: \u{201c}The man not standing\"

Now, please generate phrase labels based on the following attribute categories:
- Color_P+: Describes objects or characters based on the actual color attribute using positive logic.
- Color_P-: Describes objects or characters using a color attribute that is inconsistent with the actual attribute.
- Color_N+: Applies negation to the color attributes described in \u{201c}Color_P-\".
- Color_N-: Applies negation to the color attributes described in \u{201c}Color_P+\".
- Position_P+: Describes the position of objects or characters in bbox, ensuring the description matches the actual position attribute.
- Position_P-: Describes the position using modifiers that are inconsistent with the actual position attribute.
- Position_N+: Applies negation to the position attributes in \u{201c}Position_P-\".
- Position_N-: Applies negation to the position attributes in \u{201c}Position_P+\".
- State_P+: Describes objects or characters based on their actual state using positive logic.
- State_P-: Describes the state using modifiers that are inconsistent with the actual state attribute.
- State_N+: Applies negation to the state attributes described in \u{201c}State_P-\".
- State_N-: Applies negation to the state attributes described in \u{201c}State_P+\".
";

/// Full prompt text for one single-annotation image.
pub fn emit_prompt(image_ref: &str, bbox: [f64; 4], category: &str) -> String {
    format!(
        "{INSTRUCTION}\nImage: {image_ref}\nCategory: {category}\nBounding box (x, y, w, h): [{}, {}, {}, {}]\n",
        bbox[0], bbox[1], bbox[2], bbox[3]
    )
}
