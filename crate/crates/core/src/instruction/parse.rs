use super::{normalize, Color, Command, Grammar, InstructionError, ObjectDescriptor, Shape, Slot, Template};
use crate::scene::Scene;

/// Raw words captured by one structural template match.
struct Capture<'a> {
    verb: &'a str,
    prep: &'a [String],
    target: [&'a str; 2],
    base: [&'a str; 2],
}

impl Grammar {
    /// Parses instruction text into a [`Command`].
    ///
    /// Object slots accept any two words structurally and are validated
    /// afterwards, so an out-of-vocabulary attribute reports as such instead
    /// of as a structural mismatch.
    pub fn parse(&self, text: &str) -> Result<Command, InstructionError> {
        let tokens = normalize(text);
        let preps = self.preps();
        let mut first_err: Option<InstructionError> = None;
        for template in &self.templates {
            let mut captures = Vec::new();
            match_slots(self, &preps, &template.slots, &tokens, &mut Partial::default(), &mut captures);
            for cap in captures {
                match self.resolve(&cap) {
                    Ok(cmd) => return Ok(cmd),
                    Err(e) => {
                        let replace = match (&first_err, &e) {
                            (None, _) => true,
                            (Some(InstructionError::UnknownAction), InstructionError::UnknownAttribute(_)) => true,
                            _ => false,
                        };
                        if replace {
                            first_err = Some(e);
                        }
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        if tokens.iter().any(|w| self.is_verb(w)) {
            Err(InstructionError::MalformedStructure)
        } else {
            Err(InstructionError::UnknownAction)
        }
    }

    fn resolve(&self, cap: &Capture<'_>) -> Result<Command, InstructionError> {
        let target = descriptor(cap.target)?;
        let base = descriptor(cap.base)?;
        let action = self
            .action_for(cap.verb, cap.prep)
            .ok_or(InstructionError::UnknownAction)?;
        Ok(Command { action, target, base })
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }
}

fn descriptor(words: [&str; 2]) -> Result<ObjectDescriptor, InstructionError> {
    let color: Color = words[0].parse()?;
    let shape: Shape = words[1].parse()?;
    Ok(ObjectDescriptor { shape, color })
}

#[derive(Default, Clone)]
struct Partial<'a> {
    verb: Option<&'a str>,
    prep: Option<&'a [String]>,
    target: Option<[&'a str; 2]>,
    base: Option<[&'a str; 2]>,
}

fn match_slots<'a>(
    grammar: &Grammar,
    preps: &[&'a [String]],
    slots: &[Slot],
    tokens: &'a [String],
    partial: &mut Partial<'a>,
    out: &mut Vec<Capture<'a>>,
) {
    let Some((slot, rest)) = slots.split_first() else {
        if tokens.is_empty() {
            out.push(Capture {
                verb: partial.verb.unwrap(),
                prep: partial.prep.unwrap(),
                target: partial.target.unwrap(),
                base: partial.base.unwrap(),
            });
        }
        return;
    };
    match slot {
        Slot::Word(w) => {
            if tokens.first() == Some(w) {
                match_slots(grammar, preps, rest, &tokens[1..], partial, out);
            }
        }
        Slot::Verb => {
            if let Some(t) = tokens.first().filter(|t| grammar.is_verb(t)) {
                partial.verb = Some(t.as_str());
                match_slots(grammar, preps, rest, &tokens[1..], partial, out);
            }
        }
        Slot::Prep => {
            for p in preps {
                if tokens.starts_with(p) {
                    partial.prep = Some(*p);
                    match_slots(grammar, preps, rest, &tokens[p.len()..], partial, out);
                }
            }
        }
        Slot::Target | Slot::Base => {
            if tokens.len() >= 2 {
                let pair = [tokens[0].as_str(), tokens[1].as_str()];
                if *slot == Slot::Target {
                    partial.target = Some(pair);
                } else {
                    partial.base = Some(pair);
                }
                match_slots(grammar, preps, rest, &tokens[2..], partial, out);
            }
        }
    }
}

/// Parses with the built-in grammar.
pub fn parse(text: &str) -> Result<Command, InstructionError> {
    Grammar::builtin().parse(text)
}

/// Resolves the command's descriptors to `(base_id, target_id)` in the scene.
pub fn ground(cmd: &Command, scene: &Scene) -> Result<(u32, u32), InstructionError> {
    let find = |d: &ObjectDescriptor| {
        let mut hits = scene.objects.iter().filter(|o| o.descriptor == *d);
        match (hits.next(), hits.next()) {
            (None, _) => Err(InstructionError::NoReferent(d.to_string())),
            (Some(o), None) => Ok(o.id),
            (Some(_), Some(_)) => Err(InstructionError::AmbiguousReferent(d.to_string())),
        }
    };
    Ok((find(&cmd.base)?, find(&cmd.target)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::AssemblyAction;

    fn d(color: Color, shape: Shape) -> ObjectDescriptor {
        ObjectDescriptor { shape, color }
    }

    #[test]
    fn put_upon_is_stack_on() {
        let cmd = parse("put the green brick upon the gray base").unwrap();
        assert_eq!(cmd, Command {
            action: AssemblyAction::StackOn,
            target: d(Color::Green, Shape::Brick),
            base: d(Color::Gray, Shape::Base),
        });
    }

    #[test]
    fn multiword_prepositions() {
        let cmd = parse("Grab the red cube and place it to the right of the blue slab.").unwrap();
        assert_eq!(cmd.action, AssemblyAction::AssembleRight);
        let cmd = parse("place the cyan peg in front of the yellow socket").unwrap();
        assert_eq!(cmd.action, AssemblyAction::AssembleFront);
        let cmd = parse("please assemble the red corner together with the blue cube").unwrap();
        assert_eq!(cmd.action, AssemblyAction::CombineWith);
        assert_eq!(cmd.target, d(Color::Red, Shape::Corner));
        let cmd = parse("take the red cube and place it on top of the blue base").unwrap();
        assert_eq!(cmd.action, AssemblyAction::StackOn);
    }

    #[test]
    fn error_kinds() {
        assert_eq!(parse("teleport the cube"), Err(InstructionError::UnknownAction));
        assert_eq!(parse(""), Err(InstructionError::UnknownAction));
        assert_eq!(
            parse("stack the purple pyramid on the red cube"),
            Err(InstructionError::UnknownAttribute("pyramid".into()))
        );
        assert_eq!(
            parse("stack the orange cube on the red base"),
            Err(InstructionError::UnknownAttribute("orange".into()))
        );
        assert_eq!(parse("stack the red cube"), Err(InstructionError::MalformedStructure));
        assert_eq!(parse("stack the red cube upon the blue base"), Err(InstructionError::UnknownAction));
    }

    #[test]
    fn never_panics_on_junk() {
        for s in ["the the the", "stack on on on", "and it", "grab the and stack it on the", "🧱 stack"] {
            let _ = parse(s);
        }
    }
}
