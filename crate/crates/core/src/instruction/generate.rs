use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AssemblyAction, Command, Grammar, InstructionError, ObjectDescriptor};
use crate::geometry::block_catalog;
use crate::scene::{action_supported, Scene, SceneObject};

/// A generated instruction together with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub cmd: Command,
    pub base_id: u32,
    pub target_id: u32,
    pub template: String,
}

fn unique_objects(scene: &Scene) -> Vec<&SceneObject> {
    let mut counts: HashMap<ObjectDescriptor, usize> = HashMap::new();
    for o in &scene.objects {
        *counts.entry(o.descriptor).or_default() += 1;
    }
    scene.objects.iter().filter(|o| counts[&o.descriptor] == 1).collect()
}

fn pairs_for<'a>(objs: &[&'a SceneObject], action: AssemblyAction) -> Vec<(&'a SceneObject, &'a SceneObject)> {
    let cat = block_catalog();
    let mut out = Vec::new();
    for t in objs {
        for b in objs {
            if t.id == b.id {
                continue;
            }
            let (Some(bm), Some(tm)) = (cat.get(b.block_id), cat.get(t.block_id)) else {
                continue;
            };
            if action_supported(action, bm, tm) {
                out.push((*t, *b));
            }
        }
    }
    out
}

impl Grammar {
    /// Samples an action uniformly among those the scene supports, then an
    /// object pair, template and phrase.
    pub fn generate(&self, scene: &Scene, seed: u64) -> Result<Expression, InstructionError> {
        let objs = unique_objects(scene);
        if objs.len() < 2 {
            return Err(InstructionError::AmbiguousScene);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supported: Vec<AssemblyAction> = AssemblyAction::ALL
            .iter()
            .copied()
            .filter(|a| !pairs_for(&objs, *a).is_empty())
            .collect();
        let action = *supported.choose(&mut rng).ok_or(InstructionError::AmbiguousScene)?;
        self.render_for(&objs, action, &mut rng)
    }

    /// Like [`Grammar::generate`] with the action fixed.
    pub fn generate_for(
        &self,
        scene: &Scene,
        action: AssemblyAction,
        seed: u64,
    ) -> Result<Expression, InstructionError> {
        let objs = unique_objects(scene);
        if objs.len() < 2 {
            return Err(InstructionError::AmbiguousScene);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.render_for(&objs, action, &mut rng)
    }

    fn render_for(
        &self,
        objs: &[&SceneObject],
        action: AssemblyAction,
        rng: &mut ChaCha8Rng,
    ) -> Result<Expression, InstructionError> {
        let pairs = pairs_for(objs, action);
        let (target, base) = *pairs.choose(rng).ok_or(InstructionError::NoCompatiblePair(action))?;
        let template = self.templates.choose(rng).expect("grammar has templates");
        let phrase = self.lexicon[&action].choose(rng).expect("action has phrases");
        let text = template.render(
            phrase,
            &target.descriptor.to_string(),
            &base.descriptor.to_string(),
        );
        Ok(Expression {
            text,
            cmd: Command {
                action,
                target: target.descriptor,
                base: base.descriptor,
            },
            base_id: base.id,
            target_id: target.id,
            template: template.id.clone(),
        })
    }
}

pub fn generate_expression(scene: &Scene, rng_seed: u64) -> Result<Expression, InstructionError> {
    Grammar::builtin().generate(scene, rng_seed)
}

pub fn generate_expression_for(
    scene: &Scene,
    action: AssemblyAction,
    rng_seed: u64,
) -> Result<Expression, InstructionError> {
    Grammar::builtin().generate_for(scene, action, rng_seed)
}
