mod common;

use common::*;
use pbp::experiment::{fig4_model, random_latent_tree};
use pbp::junction_tree::{LatentJunctionTree, DEFAULT_BETA_CAP};
use pbp::model::{random_model, Structure};

/// The population operator maps the separator's conditional statistics onto the
/// conditional expectation of the children's joint statistics, including separators
/// with several children.
#[test]
fn operator_identity_on_branching_trees() {
    let mut structures: Vec<Structure> = (0..30).map(|s| random_latent_tree(s, None).unwrap()).collect();
    structures.push(fig4_model(2, 1).unwrap().structure().clone());
    structures.push(fig4_model(3, 1).unwrap().structure().clone());
    let mut branching = 0;
    for (i, s) in structures.iter().enumerate() {
        let tree = LatentJunctionTree::build(s, DEFAULT_BETA_CAP).unwrap();
        branching += tree.non_leaf_separators().iter().filter(|&&x| tree.child_separators(x).len() >= 2).count();
        let m = random_model(s, i as u64 + 40);
        let (err, _, _) = operator_identity_error(&m);
        assert!(err <= 1e-8, "structure {i}: operator identity off by {err:e}");
    }
    assert!(branching > 0, "no separator with several children was exercised");
}
