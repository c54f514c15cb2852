use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{normalize, AssemblyAction, Color, InstructionError, Shape};

const BUILTIN_GRAMMAR: &str = include_str!("../../data/grammar.json");

/// Fixed token sequence length fed to the text encoder.
pub const MAX_TOKENS: usize = 16;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// An action phrase split into its leading verb and the trailing preposition words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phrase {
    pub verb: String,
    pub prep: Vec<String>,
}

impl Phrase {
    fn parse(text: &str) -> Result<Self, InstructionError> {
        let words = normalize(text);
        match words.split_first() {
            Some((verb, prep)) if !prep.is_empty() => Ok(Phrase {
                verb: verb.clone(),
                prep: prep.to_vec(),
            }),
            _ => Err(InstructionError::InvalidGrammar(format!(
                "phrase `{text}` needs a verb and a preposition"
            ))),
        }
    }

    pub fn text(&self) -> String {
        format!("{} {}", self.verb, self.prep.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(String),
    Verb,
    Prep,
    Target,
    Base,
}

#[derive(Clone, Debug)]
pub struct Template {
    pub id: String,
    pub pattern: String,
    pub slots: Vec<Slot>,
}

impl Template {
    fn compile(id: &str, pattern: &str) -> Result<Self, InstructionError> {
        let slots: Vec<Slot> = pattern
            .split_whitespace()
            .map(|w| match w {
                "{verb}" => Slot::Verb,
                "{prep}" => Slot::Prep,
                "{obj1}" => Slot::Target,
                "{obj2}" => Slot::Base,
                other => Slot::Word(other.to_lowercase()),
            })
            .collect();
        for needed in [Slot::Verb, Slot::Prep, Slot::Target, Slot::Base] {
            if slots.iter().filter(|s| **s == needed).count() != 1 {
                return Err(InstructionError::InvalidGrammar(format!(
                    "template `{id}` must use each of {{verb}} {{prep}} {{obj1}} {{obj2}} once"
                )));
            }
        }
        if let Some(Slot::Word(w)) = slots.iter().find(|s| matches!(s, Slot::Word(w) if normalize(w) != [w.clone()])) {
            return Err(InstructionError::InvalidGrammar(format!("template word `{w}` is not a plain word")));
        }
        Ok(Template {
            id: id.to_string(),
            pattern: pattern.to_string(),
            slots,
        })
    }

    /// Renders the template; the first letter is capitalized.
    pub fn render(&self, phrase: &Phrase, target: &str, base: &str) -> String {
        let prep = phrase.prep.join(" ");
        let words: Vec<&str> = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Word(w) => w.as_str(),
                Slot::Verb => phrase.verb.as_str(),
                Slot::Prep => prep.as_str(),
                Slot::Target => target,
                Slot::Base => base,
            })
            .collect();
        let text = words.join(" ");
        let mut chars = text.chars();
        match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => text,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GrammarFile {
    phrases: BTreeMap<AssemblyAction, Vec<String>>,
    templates: Vec<TemplateFile>,
}

#[derive(Serialize, Deserialize)]
struct TemplateFile {
    id: String,
    pattern: String,
}

/// Phrase lexicon, templates and the derived token vocabulary.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub lexicon: BTreeMap<AssemblyAction, Vec<Phrase>>,
    pub templates: Vec<Template>,
    pub vocab: Vocab,
}

impl Grammar {
    pub fn builtin() -> &'static Grammar {
        static GRAMMAR: OnceLock<Grammar> = OnceLock::new();
        GRAMMAR.get_or_init(|| Grammar::from_json(BUILTIN_GRAMMAR).expect("built-in grammar is valid"))
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_GRAMMAR
    }

    pub fn from_json(text: &str) -> Result<Self, InstructionError> {
        let file: GrammarFile =
            serde_json::from_str(text).map_err(|e| InstructionError::InvalidGrammar(e.to_string()))?;
        let mut lexicon = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for action in AssemblyAction::ALL {
            let phrases = file.phrases.get(action).ok_or_else(|| {
                InstructionError::InvalidGrammar(format!("no phrases for {action}"))
            })?;
            if phrases.len() < 2 {
                return Err(InstructionError::InvalidGrammar(format!(
                    "{action} needs at least two phrases"
                )));
            }
            let mut parsed = Vec::new();
            for p in phrases {
                let phrase = Phrase::parse(p)?;
                if !seen.insert(phrase.text()) {
                    return Err(InstructionError::InvalidGrammar(format!(
                        "phrase `{p}` is used more than once"
                    )));
                }
                parsed.push(phrase);
            }
            lexicon.insert(*action, parsed);
        }
        if file.templates.is_empty() {
            return Err(InstructionError::InvalidGrammar("no templates".into()));
        }
        let templates = file
            .templates
            .iter()
            .map(|t| Template::compile(&t.id, &t.pattern))
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocab::build(&lexicon, &templates);
        Ok(Grammar {
            lexicon,
            templates,
            vocab,
        })
    }

    pub fn to_json(&self) -> String {
        let file = GrammarFile {
            phrases: self
                .lexicon
                .iter()
                .map(|(a, ps)| (*a, ps.iter().map(Phrase::text).collect()))
                .collect(),
            templates: self
                .templates
                .iter()
                .map(|t| TemplateFile {
                    id: t.id.clone(),
                    pattern: t.pattern.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("grammar serializes")
    }

    pub fn action_for(&self, verb: &str, prep: &[String]) -> Option<AssemblyAction> {
        self.lexicon.iter().find_map(|(a, ps)| {
            ps.iter()
                .any(|p| p.verb == verb && p.prep == prep)
                .then_some(*a)
        })
    }

    pub fn is_verb(&self, word: &str) -> bool {
        self.lexicon.values().flatten().any(|p| p.verb == word)
    }

    /// Distinct preposition sequences, longest first.
    pub fn preps(&self) -> Vec<&[String]> {
        let mut v: Vec<&[String]> = self.lexicon.values().flatten().map(|p| p.prep.as_slice()).collect();
        v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        v.dedup();
        v
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text)
    }
}

/// The built-in lexicon as plain strings.
pub fn phrase_lexicon() -> BTreeMap<AssemblyAction, Vec<String>> {
    Grammar::builtin()
        .lexicon
        .iter()
        .map(|(a, ps)| (*a, ps.iter().map(Phrase::text).collect()))
        .collect()
}

/// Closed word list: `<pad>`, `<unk>`, then every grammar word in sorted order.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn build(lexicon: &BTreeMap<AssemblyAction, Vec<Phrase>>, templates: &[Template]) -> Self {
        let mut set = BTreeSet::new();
        for p in lexicon.values().flatten() {
            set.insert(p.verb.clone());
            set.extend(p.prep.iter().cloned());
        }
        for t in templates {
            for s in &t.slots {
                if let Slot::Word(w) = s {
                    set.insert(w.clone());
                }
            }
        }
        set.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        set.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(set);
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Exactly `MAX_TOKENS` ids, right-padded (longer inputs are truncated).
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = normalize(text).iter().map(|w| self.id(w)).take(MAX_TOKENS).collect();
        ids.resize(MAX_TOKENS, PAD_ID);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_contains_reference_phrases() {
        let lex = phrase_lexicon();
        let stack = &lex[&AssemblyAction::StackOn];
        assert!(stack.contains(&"stack on".to_string()));
        assert!(stack.contains(&"put upon".to_string()));
        assert!(lex[&AssemblyAction::CombineWith].contains(&"assemble together with".to_string()));
        assert!(lex[&AssemblyAction::InsertTo].contains(&"insert to".to_string()));
        assert!(lex[&AssemblyAction::AssembleBack].contains(&"assemble behind".to_string()));
    }

    #[test]
    fn lexicon_well_formed() {
        let lex = phrase_lexicon();
        assert_eq!(lex.len(), 7);
        let mut all = BTreeSet::new();
        for ps in lex.values() {
            assert!(ps.len() >= 2);
            for p in ps {
                assert!(all.insert(p.clone()), "duplicate phrase {p}");
            }
        }
    }

    #[test]
    fn four_templates() {
        assert_eq!(Grammar::builtin().templates.len(), 4);
    }

    #[test]
    fn vocab_size_is_small() {
        let v = &Grammar::builtin().vocab;
        assert!(v.len() > 30 && v.len() <= 64, "{}", v.len());
        assert_eq!(v.word(PAD_ID), Some("<pad>"));
        assert_eq!(v.word(UNK_ID), Some("<unk>"));
    }

    #[test]
    fn tokenize_cases() {
        let g = Grammar::builtin();
        let ids = g.tokenize("stack on");
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(ids[0], g.vocab.id("stack"));
        assert_eq!(ids[1], g.vocab.id("on"));
        assert!(ids[2..].iter().all(|&i| i == PAD_ID));
        assert_eq!(g.tokenize(""), vec![PAD_ID; MAX_TOKENS]);
        assert_eq!(g.tokenize("teleport")[0], UNK_ID);
        let long = "stack ".repeat(40);
        assert_eq!(g.tokenize(&long).len(), MAX_TOKENS);
    }

    #[test]
    fn grammar_json_round_trip() {
        let g = Grammar::builtin();
        let again = Grammar::from_json(&g.to_json()).unwrap();
        assert_eq!(again.lexicon, g.lexicon);
        assert_eq!(again.templates.len(), g.templates.len());
    }

    #[test]
    fn rejects_bad_grammars() {
        let dup = BUILTIN_GRAMMAR.replace("\"join with\"", "\"stack on\"");
        assert!(matches!(Grammar::from_json(&dup), Err(InstructionError::InvalidGrammar(_))));
        let no_prep = BUILTIN_GRAMMAR.replace("\"{verb} the {obj1} {prep} the {obj2}\"", "\"{verb} the {obj1} the {obj2}\"");
        assert!(Grammar::from_json(&no_prep).is_err());
        let lonely = BUILTIN_GRAMMAR.replace("\"plug into\"", "\"plug\"");
        assert!(Grammar::from_json(&lonely).is_err());
    }
}
