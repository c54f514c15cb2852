use lanpose_core::geomfeat::NoiseConfig;
use lanpose_core::geometry::Pose;
use lanpose_core::instruction::Grammar;
use lanpose_core::metrics::{score, Prediction, SampleScore};
use lanpose_core::parallel::thread_pool;
use lanpose_core::scene::DatasetRecord;
use rayon::prelude::*;

use crate::data::{eval_noise_seed, object_sample, MapBatch, ObjectSample, Role, TokenBatch};
use crate::graph::Graph;
use crate::model::{Bound, FusionVariant, Network};
use crate::NetError;

const CHUNK: usize = 32;

struct ChunkOut {
    base: Vec<Pose>,
    target: Vec<Pose>,
    assembly: Option<Vec<Pose>>,
}

fn samples(net: &Network, recs: &[DatasetRecord], role: Role, noise: &NoiseConfig) -> Result<Vec<ObjectSample>, NetError> {
    recs.iter()
        .map(|r| object_sample(r, role, net.cfg.map_size, noise, eval_noise_seed(r, role)))
        .collect()
}

fn run_chunk(net: &Network, grammar: &Grammar, recs: &[DatasetRecord], noise: &NoiseConfig, language: bool) -> Result<ChunkOut, NetError> {
    let base = samples(net, recs, Role::Base, noise)?;
    let target = samples(net, recs, Role::Target, noise)?;
    let base_batch = MapBatch::from_samples(&base.iter().collect::<Vec<_>>());
    let target_batch = MapBatch::from_samples(&target.iter().collect::<Vec<_>>());

    let mut g = Graph::new();
    let b = Bound::new(&net.params, &mut g, false)?;
    let dbase = net.direct_branch(&mut g, &b, &base_batch)?;
    let dtarget = net.direct_branch(&mut g, &b, &target_batch)?;
    let decode = |outs: Vec<crate::model::PoseHeadOutput>, s: &[ObjectSample]| -> Result<Vec<Pose>, NetError> {
        outs.iter().zip(s).map(|(o, s)| o.decode(&s.k, &s.bbox)).collect()
    };
    let base_poses = decode(dbase.pose.read(&g), &base)?;
    let target_poses = decode(dtarget.pose.read(&g), &target)?;

    let assembly = if language {
        let texts: Vec<&str> = recs.iter().map(|r| r.instruction.as_str()).collect();
        let tokens = TokenBatch::from_texts(grammar, &texts);
        let text = net.text_encode(&mut g, &b, &tokens)?;
        let out = net.language_branch(&mut g, &b, dbase.features, text, &tokens, &base_batch)?.read(&g);
        let poses = out
            .iter()
            .zip(&base)
            .zip(&base_poses)
            .map(|((o, s), pb)| match net.cfg.variant {
                FusionVariant::Relative => Ok(pb.compose(&o.decode_relative()?)),
                _ => o.decode(&s.k, &s.bbox),
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        Some(poses)
    } else {
        None
    };
    Ok(ChunkOut { base: base_poses, target: target_poses, assembly })
}

fn run_all(net: &Network, records: &[DatasetRecord], noise: &NoiseConfig, language: bool) -> Result<Vec<ChunkOut>, NetError> {
    let grammar = Grammar::builtin();
    thread_pool().install(|| {
        records
            .par_chunks(CHUNK)
            .map(|c| run_chunk(net, &grammar, c, noise, language))
            .collect()
    })
}

/// Object and assembly poses for every record. Map noise is seeded per record,
/// so results do not depend on chunking or thread count.
pub fn predict(net: &Network, records: &[DatasetRecord], noise: &NoiseConfig) -> Result<Vec<Prediction>, NetError> {
    let chunks = run_all(net, records, noise, true)?;
    let mut out = Vec::with_capacity(records.len());
    let mut recs = records.iter();
    for c in chunks {
        let asm = c.assembly.expect("language branch ran");
        for ((base, target), assembly) in c.base.into_iter().zip(c.target).zip(asm) {
            let r = recs.next().expect("one prediction per record");
            out.push(Prediction { record_id: r.id, target, base, assembly });
        }
    }
    Ok(out)
}

/// Direct-branch scores for base and target objects, without running the language branch.
pub fn object_scores(net: &Network, records: &[DatasetRecord], noise: &NoiseConfig) -> Result<Vec<SampleScore>, NetError> {
    let chunks = run_all(net, records, noise, false)?;
    let cat = lanpose_core::geometry::block_catalog();
    let mut out = Vec::with_capacity(2 * records.len());
    let mut recs = records.iter();
    for c in chunks {
        for (base, target) in c.base.into_iter().zip(c.target) {
            let r = recs.next().expect("one prediction per record");
            let bm = cat.get(r.base_block()).expect("validated record");
            let tm = cat.get(r.target_block()).expect("validated record");
            out.push(score(&base, &r.gt.base, bm));
            out.push(score(&target, &r.gt.target, tm));
        }
    }
    Ok(out)
}
