//! Feature (FCA) and relation (GERA) alignment between a dense and a sparse
//! view of the same frame, with gradients flowing to the sparse branch.

use lsf::align::{fca_loss, EmbeddingNet, GeraConfig, GeraPass};
use lsf::beams::{make_variants_with_labels, BeamVariantSpec};
use lsf::detector::{bev_featurize, make_proposals, GridSpec, ModelConfig, ProposalConfig, ToyModel};
use lsf::synth::{generate_scene, SceneSpec};

fn main() -> lsf::Result<()> {
    let frame = generate_scene(&SceneSpec { seed: 4, ..SceneSpec::default() })?;
    let sparse = make_variants_with_labels(&frame.cloud, &frame.beam_labels, &[BeamVariantSpec::new("16*", 4, 2)])?
        .remove(0);
    println!("dense {} points, sparse {} points", frame.cloud.len(), sparse.len());

    let grid = GridSpec::default();
    let cfg = ModelConfig::default();
    let model = ToyModel::seeded(cfg, 0);
    let rois = make_proposals(&frame.boxes, &grid, &cfg, &ProposalConfig::default(), 0);
    let (dense_f, _) = model.roi_features(&bev_featurize(&frame.cloud, &grid)?, &rois)?;
    let (sparse_f, _) = model.roi_features(&bev_featurize(&sparse, &grid)?, &rois)?;

    let fca = fca_loss(&dense_f, &sparse_f)?;
    let norm = fca.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("{} proposals, FCA {:.4}, |grad| {:.4}", rois.len(), fca.loss, norm);

    let net = EmbeddingNet::seeded(dense_f.proposal_len(), 32, 16, 1);
    let mut pass = GeraPass::new();
    let gera = pass.forward(&net, &dense_f, &sparse_f, &GeraConfig::default())?;
    let grads = pass.backward(&net, 1.0)?;
    let norm = grads.features.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("GERA {gera:.4}, |grad| {norm:.4}");
    for lambda in [0.0, 0.1] {
        let cfg = GeraConfig { lambda, ..GeraConfig::default() };
        let same = pass.forward(&net, &dense_f, &dense_f, &cfg)?;
        println!("dense view against itself, lambda {lambda}: GERA {same:.4}");
    }
    Ok(())
}
