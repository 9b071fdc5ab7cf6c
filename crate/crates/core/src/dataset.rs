//! Flattens decision trees into training instances in the scaffold's exact
//! inference format, with seeded nested subsampling of synthesized decisions.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::render_action;
use crate::boost::{DecisionNode, DecisionSource, TrajTree};
use crate::curation::ScreenshotResolver;
use crate::gateway::hex_digest;
use crate::prompts::{scaffold_history_text, scaffold_system, ScaffoldConfig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dangling image ref {image_ref:?} (trajectory {trajectory_id}, step {step_index})")]
    DanglingImageRef {
        image_ref: String,
        trajectory_id: String,
        step_index: usize,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a training instance came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trajectory_id: String,
    pub step_index: usize,
    pub source: DecisionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
}

/// One (prompt context, target decision) pair in the scaffold's inference
/// format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub system_text: String,
    pub task: String,
    pub history_text: String,
    pub image_ref: String,
    /// Thought + "\nAction: " + canonical action; parses via `parse_decision`.
    pub target_text: String,
    pub provenance: Provenance,
}

/// Per-step selection of synthesized decisions. The scaling factor of the
/// resulting data is `synthesized_per_step + 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoostSelection {
    pub synthesized_per_step: usize,
    pub seed: u64,
}

impl BoostSelection {
    pub fn scaling_factor(&self) -> usize {
        self.synthesized_per_step + 1
    }

    pub fn from_scaling_factor(s_prime: usize, seed: u64) -> Self {
        assert!(s_prime >= 1, "scaling factor must be at least 1");
        Self {
            synthesized_per_step: s_prime - 1,
            seed,
        }
    }
}

/// Renders the scaffold history for trunk step `k`: only prior HUMAN
/// decisions on the trunk, never leaves.
pub fn build_history_text(tree: &TrajTree, k: usize, cfg: &ScaffoldConfig) -> String {
    let entries: Vec<_> = tree.trunk[..k]
        .iter()
        .map(|s| crate::prompts::HistoryEntry::new(s.human.thought.clone(), s.human.action.clone()))
        .collect();
    scaffold_history_text(&tree.task, &entries, cfg)
}

fn target_text(node: &DecisionNode) -> String {
    format!("{}\nAction: {}", node.thought, render_action(&node.action))
}

/// Per-step leaf permutation, stable in (seed, trajectory id, step index).
/// Taking the first `s` elements gives nested subsets across scaling factors.
fn leaf_permutation(seed: u64, trajectory_id: &str, step_index: usize, len: usize) -> Vec<usize> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(trajectory_id.as_bytes());
    hasher.update((step_index as u64).to_le_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    let mut indices: Vec<usize> = (0..len).collect();
    indices.shuffle(&mut rng);
    indices
}

/// Flattens one tree into instances: for every trunk step, the human decision
/// plus up to `s` leaves chosen without replacement by the seeded per-step
/// permutation. Output order is (step, human first, then sample index).
pub fn flatten(tree: &TrajTree, sel: &BoostSelection, cfg: &ScaffoldConfig) -> Vec<TrainingInstance> {
    let system = scaffold_system();
    let mut out = Vec::new();
    for (k, step) in tree.trunk.iter().enumerate() {
        let history_text = build_history_text(tree, k, cfg);
        let image_ref = step.snapshot.observation.screenshot_ref.clone();
        let mut push = |node: &DecisionNode| {
            out.push(TrainingInstance {
                system_text: system.clone(),
                task: tree.task.clone(),
                history_text: history_text.clone(),
                image_ref: image_ref.clone(),
                target_text: target_text(node),
                provenance: Provenance {
                    trajectory_id: tree.trajectory_id.clone(),
                    step_index: k,
                    source: node.source,
                    sample_index: node.sample_index,
                },
            });
        };
        push(&step.human);

        let take = sel.synthesized_per_step.min(step.leaves.len());
        let mut chosen: Vec<usize> =
            leaf_permutation(sel.seed, &tree.trajectory_id, k, step.leaves.len())
                .into_iter()
                .take(take)
                .collect();
        chosen.sort_by_key(|&i| step.leaves[i].sample_index);
        for i in chosen {
            push(&step.leaves[i]);
        }
    }
    out
}

/// Dataset manifest: bookkeeping for one export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub human_count: usize,
    pub synthesized_count: usize,
    pub scaling_factor: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize)]
struct ConversationRecord<'a> {
    messages: [serde_json::Value; 3],
    provenance: &'a Provenance,
}

/// Writes instances as line-delimited conversation records. Byte output is
/// deterministic for fixed inputs and seed.
pub fn export_dataset<W: Write>(
    instances: &[TrainingInstance],
    sel: &BoostSelection,
    cfg: &ScaffoldConfig,
    resolver: &dyn ScreenshotResolver,
    mut sink: W,
) -> Result<Manifest, DatasetError> {
    let mut human_count = 0;
    let mut synthesized_count = 0;
    for instance in instances {
        if !resolver.resolvable(&instance.image_ref) {
            return Err(DatasetError::DanglingImageRef {
                image_ref: instance.image_ref.clone(),
                trajectory_id: instance.provenance.trajectory_id.clone(),
                step_index: instance.provenance.step_index,
            });
        }
        match instance.provenance.source {
            DecisionSource::Human => human_count += 1,
            DecisionSource::Synthesized => synthesized_count += 1,
        }
        let user_text =
            crate::prompts::scaffold_user_text(&instance.task, &instance.history_text);
        let record = ConversationRecord {
            messages: [
                serde_json::json!({"role": "system", "content": instance.system_text}),
                serde_json::json!({"role": "user", "content": [
                    {"type": "text", "text": user_text},
                    {"type": "image", "image": instance.image_ref},
                ]}),
                serde_json::json!({"role": "assistant", "content": instance.target_text}),
            ],
            provenance: &instance.provenance,
        };
        writeln!(sink, "{}", serde_json::to_string(&record).unwrap())?;
    }

    let mut hasher = Sha256::new();
    hasher.update(
        serde_json::to_string(&(sel, cfg.max_prompt_tokens))
            .unwrap()
            .as_bytes(),
    );
    Ok(Manifest {
        count: instances.len(),
        human_count,
        synthesized_count,
        scaling_factor: sel.scaling_factor(),
        seed: sel.seed,
        config_hash: hex_digest(hasher),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{parse_decision, Action, Resolution};
    use crate::boost::{EnvironmentSnapshot, TreeStep};
    use crate::curation::AcceptAll;
    use crate::prompts::HistoryEntry;
    use crate::trajectory::Observation;
    use std::collections::BTreeSet;

    fn node(source: DecisionSource, idx: Option<u32>, tag: &str) -> DecisionNode {
        DecisionNode {
            thought: format!("thought {tag}"),
            action: Action::Click {
                x: idx.unwrap_or(99),
                y: 7,
            },
            source,
            sample_index: idx,
            raw_text: matches!(source, DecisionSource::Synthesized)
                .then(|| format!("raw leaf text {tag}")),
        }
    }

    fn tree(steps: usize, leaves_per_step: usize) -> TrajTree {
        let trunk = (0..steps)
            .map(|k| {
                let history = (0..k)
                    .map(|i| {
                        HistoryEntry::new(
                            format!("thought human-{i}"),
                            Action::Click { x: 99, y: 7 },
                        )
                    })
                    .collect();
                TreeStep {
                    snapshot: EnvironmentSnapshot {
                        task: "the task".into(),
                        observation: Observation::new(format!("s{k}.png"), Resolution::default()),
                        history,
                    },
                    human: node(DecisionSource::Human, None, &format!("human-{k}")),
                    leaves: (0..leaves_per_step as u32)
                        .map(|i| node(DecisionSource::Synthesized, Some(i), &format!("leaf-{k}-{i}")))
                        .collect(),
                    drops: vec![],
                }
            })
            .collect();
        TrajTree {
            trajectory_id: "tr1".into(),
            task: "the task".into(),
            trunk,
        }
    }

    fn sel(s: usize) -> BoostSelection {
        BoostSelection {
            synthesized_per_step: s,
            seed: 42,
        }
    }

    #[test]
    fn history_contains_only_human_trunk_decisions() {
        let t = tree(3, 9);
        let cfg = ScaffoldConfig::default();
        assert_eq!(build_history_text(&t, 0, &cfg), "None");
        let h2 = build_history_text(&t, 2, &cfg);
        assert!(h2.contains("thought human-0"));
        assert!(h2.contains("thought human-1"));
        assert!(!h2.contains("leaf"));
        assert_eq!(h2.matches("Step ").count(), 2);
    }

    #[test]
    fn full_fan_out_counts() {
        let t = tree(5, 9);
        let cfg = ScaffoldConfig::default();
        assert_eq!(flatten(&t, &sel(9), &cfg).len(), 50);
        let human_only = flatten(&t, &sel(0), &cfg);
        assert_eq!(human_only.len(), 5);
        assert!(human_only
            .iter()
            .all(|i| i.provenance.source == DecisionSource::Human));
    }

    #[test]
    fn excess_selection_clamps_to_available_leaves() {
        let t = tree(2, 4);
        assert_eq!(flatten(&t, &sel(9), &ScaffoldConfig::default()).len(), 10);
    }

    #[test]
    fn subsets_are_nested_across_scaling_factors() {
        let t = tree(4, 9);
        let cfg = ScaffoldConfig::default();
        let key = |i: &TrainingInstance| {
            (
                i.provenance.step_index,
                i.provenance.sample_index,
                i.provenance.source,
            )
        };
        let mut previous: BTreeSet<_> = BTreeSet::new();
        for s in 0..=9 {
            let current: BTreeSet<_> = flatten(&t, &sel(s), &cfg).iter().map(key).collect();
            assert!(previous.is_subset(&current), "s = {s} not nested");
            previous = current;
        }
    }

    #[test]
    fn instances_within_a_step_share_context_and_order() {
        let t = tree(3, 9);
        let instances = flatten(&t, &sel(3), &ScaffoldConfig::default());
        assert_eq!(instances.len(), 12);
        for k in 0..3 {
            let step: Vec<_> = instances
                .iter()
                .filter(|i| i.provenance.step_index == k)
                .collect();
            assert_eq!(step.len(), 4);
            assert_eq!(step[0].provenance.source, DecisionSource::Human);
            assert!(step.windows(2).skip(1).all(|w| {
                w[0].provenance.sample_index < w[1].provenance.sample_index
            }));
            assert!(step
                .iter()
                .all(|i| i.history_text == step[0].history_text
                    && i.image_ref == step[0].image_ref
                    && i.system_text == step[0].system_text));
        }
    }

    #[test]
    fn targets_round_trip_through_parse_decision() {
        let t = tree(3, 9);
        for instance in flatten(&t, &sel(9), &ScaffoldConfig::default()) {
            let (thought, action) = parse_decision(&instance.target_text).unwrap();
            assert!(!thought.is_empty());
            assert_eq!(
                format!("{thought}\nAction: {}", render_action(&action)),
                instance.target_text
            );
        }
    }

    #[test]
    fn export_is_deterministic_and_counts_sources() {
        let t = tree(5, 9);
        let cfg = ScaffoldConfig::default();
        let instances = flatten(&t, &sel(9), &cfg);

        let mut a = Vec::new();
        let manifest_a = export_dataset(&instances, &sel(9), &cfg, &AcceptAll, &mut a).unwrap();
        let mut b = Vec::new();
        let manifest_b = export_dataset(&instances, &sel(9), &cfg, &AcceptAll, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(manifest_a, manifest_b);
        assert_eq!(manifest_a.count, 50);
        assert_eq!(manifest_a.human_count, 5);
        assert_eq!(manifest_a.synthesized_count, 45);
        assert_eq!(manifest_a.scaling_factor, 10);
    }

    #[test]
    fn missing_image_names_the_instance() {
        struct Never;
        impl ScreenshotResolver for Never {
            fn resolvable(&self, _: &str) -> bool {
                false
            }
        }
        let t = tree(1, 1);
        let cfg = ScaffoldConfig::default();
        let instances = flatten(&t, &sel(1), &cfg);
        let err = export_dataset(&instances, &sel(1), &cfg, &Never, &mut Vec::new()).unwrap_err();
        match err {
            DatasetError::DanglingImageRef {
                trajectory_id,
                step_index,
                ..
            } => {
                assert_eq!(trajectory_id, "tr1");
                assert_eq!(step_index, 0);
            }
            other => panic!("unexpected: {other}"),
        }
    }
}
