//! Benchmark evaluation and embedding plots.

mod evaluate;
mod report;
mod restore;
mod viz;

pub use evaluate::{
    evaluate, evaluate_with, generalization_eval, load_eval_pairs, manifest_pairs, modcrop, route_noise_task,
    score_pairs, synthesize_pairs, EvalPair,
};
pub use report::{EvalReport, EvalSettings, ImageScore};
pub use restore::{
    dihedral, dihedral_inverse, self_ensemble_infer, tiled_restore, IdentityRestorer, ModelRestorer, Restorer,
};
pub use viz::{default_cell, position_similarity, task_similarity, viz_embeddings, SimilarityMatrix, VizOutput};
