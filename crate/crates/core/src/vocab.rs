//! Fixed 64-token vocabulary shared by the toy policy and the environments.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type TokenId = usize;

pub const THINK_OPEN: TokenId = 0;
pub const THINK_CLOSE: TokenId = 1;
pub const NEWLINE: TokenId = 2;
pub const ACTION_OPEN: TokenId = 3;
pub const ACTION_CLOSE: TokenId = 4;
pub const END: TokenId = 5;

pub const SEARCH: TokenId = 6;
pub const CLICK: TokenId = 7;

pub const NEXT: TokenId = 8;
pub const PREV: TokenId = 9;
pub const BACK: TokenId = 10;
pub const BUY: TokenId = 11;

/// `item0` .. `item9`: positions on a results page.
pub const SLOT_BASE: TokenId = 12;
pub const SLOT_COUNT: usize = 10;

pub const CATEGORIES: [&str; 6] = ["shirt", "shoes", "bag", "lamp", "mug", "pillow"];
pub const ATTRIBUTES: [&str; 13] = [
    "cotton",
    "leather",
    "wool",
    "polyester",
    "waterproof",
    "handmade",
    "organic",
    "vintage",
    "portable",
    "washable",
    "lightweight",
    "durable",
    "soft",
];
/// Option fields and the values each field can take.
pub const OPTION_FIELDS: [(&str, &[&str]); 3] = [
    ("color", &["red", "blue", "black", "white"]),
    ("size", &["s", "m", "l", "xl"]),
    ("pack", &["single", "double", "triple"]),
];
pub const DISCOURSE: [&str; 12] = [
    "okay", "let", "me", "check", "the", "so", "then", "wait", "need", "find", "maybe", "hmm",
];

pub const VOCAB_SIZE: usize = 64;

const SPECIAL_TEXT: [&str; 6] = ["<think>", "</think>", "\n", "<action>", "</action>", "<end>"];

#[derive(Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Self::build)
    }

    fn build() -> Self {
        let mut tokens: Vec<String> = SPECIAL_TEXT.iter().map(|s| s.to_string()).collect();
        tokens.extend(["search", "click", "next", "prev", "back", "buy"].map(String::from));
        tokens.extend((0..SLOT_COUNT).map(|i| format!("item{i}")));
        tokens.extend(CATEGORIES.map(String::from));
        tokens.extend(ATTRIBUTES.map(String::from));
        for (_, values) in OPTION_FIELDS {
            tokens.extend(values.iter().map(|v| v.to_string()));
        }
        tokens.extend(DISCOURSE.map(String::from));
        assert_eq!(tokens.len(), VOCAB_SIZE);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    pub fn hesitation_token(&self) -> TokenId {
        self.id("hmm").expect("hmm in vocabulary")
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= END
    }

    pub fn slot(id: TokenId) -> Option<usize> {
        (SLOT_BASE..SLOT_BASE + SLOT_COUNT)
            .contains(&id)
            .then(|| id - SLOT_BASE)
    }

    /// Field of an option value token, if it is one.
    pub fn option_field(&self, id: TokenId) -> Option<&'static str> {
        let text = self.text(id);
        OPTION_FIELDS
            .iter()
            .find(|(_, values)| values.contains(&text))
            .map(|(field, _)| *field)
    }

    /// Render a turn's tokens to text. Inside the action segment, the verb
    /// token and its arguments become `verb[args]`; slot tokens resolve
    /// through `slot_targets`.
    pub fn render(&self, tokens: &[TokenId], slot_targets: &[String]) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < tokens.len() {
            let tok = tokens[i];
            if tok == ACTION_OPEN {
                out.push_str("<action>");
                let start = i + 1;
                let mut end = start;
                while end < tokens.len() && !Self::is_special(tokens[end]) {
                    end += 1;
                }
                out.push_str(&self.render_command(&tokens[start..end], slot_targets));
                i = end;
                continue;
            }
            match tok {
                END => {}
                t if Self::is_special(t) => out.push_str(self.text(t)),
                t => {
                    if !out.is_empty() && !out.ends_with(['>', '\n']) {
                        out.push(' ');
                    }
                    out.push_str(self.text(t));
                }
            }
            i += 1;
        }
        out
    }

    /// Command text for the tokens between `<action>` and the next tag.
    pub fn render_command(&self, body: &[TokenId], slot_targets: &[String]) -> String {
        let Some((&verb, args)) = body.split_first() else {
            return String::new();
        };
        let arg_text = |t: TokenId| -> String {
            if let Some(slot) = Self::slot(t) {
                if let Some(target) = slot_targets.get(slot) {
                    return target.clone();
                }
            }
            match t {
                NEXT => "next >".into(),
                PREV => "< prev".into(),
                BACK => "back to search".into(),
                _ => self.text(t).to_string(),
            }
        };
        match verb {
            SEARCH | CLICK => {
                let inner: Vec<String> = args.iter().map(|&t| arg_text(t)).collect();
                format!("{}[{}]", self.text(verb), inner.join(" "))
            }
            _ => body
                .iter()
                .map(|&t| self.text(t))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}
