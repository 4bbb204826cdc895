//! Prompts sent to the construction services, verbatim, and parsers for the
//! replies.

use std::sync::LazyLock;

use regex::Regex;

pub const INTERACTIONS: &str = "Please help me generate interactions between two people, such as 'Back-to-back stand'";

pub fn expand(n: usize, interaction: &str) -> String {
    format!(
        "Please generate {n} prompts about two '{interaction}' people, which will be used as conditions for text-to-image generation"
    )
}

/// Inverse of [`expand`].
pub fn parse_expand(prompt: &str) -> Option<(usize, String)> {
    let rest = prompt.strip_prefix("Please generate ")?;
    let (n, rest) = rest.split_once(" prompts about two '")?;
    let (interaction, tail) = rest.rsplit_once("' people, ")?;
    if tail != "which will be used as conditions for text-to-image generation" {
        return None;
    }
    Some((n.parse().ok()?, interaction.to_string()))
}

pub const PORTRAIT_PREFIX: &str = "A portrait of 2 people";

pub fn with_prefix(prompt: &str) -> String {
    if prompt.starts_with(PORTRAIT_PREFIX) {
        prompt.to_string()
    } else {
        format!("{PORTRAIT_PREFIX}, {prompt}")
    }
}

pub const CONCEPTS: &str = "Please list the types of objects or concepts in this image. Each concept only needs to be listed once, and the essential components in the image should be listed as much as possible. Examine the provided image and identify the main components within it. Please extract a list of relevant nouns, ensuring the focus is on people and the most significant elements present in the image. Aim to identify no more than ten objects or individuals. Ensure that the selected nouns accurately represent the key components, such as: Individuals (e.g., 'man', 'woman', 'child'), Main objects (e.g., 'car', 'tree', 'building'). Return the list in a concise format. Focus on significant elements like people (without details on clothing, accessories, or expressions), and main objects or concepts of the environment. Exclude any minor details that are not central to the composition. Please separate each concept with a comma, e.g.: \"table, man, apple\". Try not to exceed ten concepts.";

pub const MAX_CONCEPTS: usize = 10;

const QUESTION_HEAD: &str =
    "Question: \"Does this word \"man\" correspond to a category of people?\" Answer: Yes. Question: \"Does this word \"";
const QUESTION_TAIL: &str = "\" correspond to a category of people?\" Answer: ";

pub fn category_question(word: &str) -> String {
    format!("{QUESTION_HEAD}{word}{QUESTION_TAIL}")
}

pub fn parse_category_question(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(QUESTION_HEAD)?.strip_suffix(QUESTION_TAIL)
}

pub const ANNOTATE: &str = "This is an image of a person. Please describe this image in detail. Generate detailed descriptions, organize your observations into two distinct sections: 'State' and 'Appearance'. 'State': Describe the actions, expressions, and poses of any individuals in the image, as well as the positions, angles, and conditions of objects. 'Consider aspects such as: Actions or motions (e.g., 'running', 'sitting'), Facial expressions (e.g., 'smiling', 'frowning'), Postures (e.g., 'standing upright', 'slouched'), Object status (e.g., 'broken', 'new') and orientation (e.g., 'tilted', 'upright'). 'Appearance': Detail the physical characteristics of individuals and objects, including: Human features (e.g., 'hair color', 'gender', 'age'), Clothing details (e.g., 'color', 'style', 'fit'), Object characteristics (e.g., 'color', 'texture', 'size'). Provide a comprehensive description with two parts of the 'State' and 'Appearance' of the mentioned concept in the image. Both parts should not be longer than 50 words. Please provide only the descriptions directly, the description should be as detailed as possible";

fn trim_item(s: &str) -> &str {
    s.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '`')).trim().trim_end_matches('.').trim()
}

/// One item per non-empty line, with list numbering and bullets removed.
pub fn parse_lines(response: &str) -> Vec<String> {
    static NUMBERING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s*").unwrap());
    response
        .lines()
        .map(|l| trim_item(&NUMBERING.replace(l, "")).to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Comma-separated concepts, trimmed and lowercased. `None` when nothing
/// usable is present.
pub fn parse_concepts(response: &str) -> Option<Vec<String>> {
    let items: Vec<String> = response
        .split([',', '\n'])
        .map(|s| trim_item(s).to_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    (!items.is_empty()).then_some(items)
}

pub fn is_yes(answer: &str) -> bool {
    trim_item(answer).to_lowercase().starts_with("yes")
}

/// Splits a reply into its State and Appearance sections. Header case and
/// surrounding quotes or emphasis are ignored.
pub fn parse_annotation(response: &str) -> Option<(String, String)> {
    static HEADER: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r#"(?i)(?:^|[\s'"*])(state|appearance)['"*]*\s*:"#).unwrap());
    let mut state = None;
    let mut appearance = None;
    for c in HEADER.captures_iter(response) {
        let which = c[1].to_lowercase();
        let slot = if which == "state" { &mut state } else { &mut appearance };
        if slot.is_none() {
            *slot = Some((c.get(0).unwrap().start(), c.get(0).unwrap().end()));
        }
    }
    let (s, a) = (state?, appearance?);
    let body = |from: (usize, usize), other: (usize, usize)| {
        let end = if other.0 > from.0 { other.0 } else { response.len() };
        trim_item(&response[from.1..end]).to_string()
    };
    let (st, ap) = (body(s, a), body(a, s));
    (!st.is_empty() && !ap.is_empty()).then_some((st, ap))
}
