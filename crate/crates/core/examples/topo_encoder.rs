//! Hierarchical pooling of gradient tensors of several sizes into meta-tokens,
//! then spatial compression to one vector.
//!
//! cargo run --release --example topo_encoder

use mnemosyne::topo::{make_repr_seq, TopoConfig, TopoEncoder};
use mnemosyne::{ParamTree, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mnemosyne::Result<()> {
    let cfg = TopoConfig {
        chunk_len: 16,
        l_max: 4,
        ..TopoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut w, mut fixed) = (ParamTree::new(), ParamTree::new());
    let enc = TopoEncoder::init(&cfg, "topo/", &mut rng, &mut w, &mut fixed)?;
    for len in [3, 40, 64, 1024, 5000] {
        let g = Tensor::from_fn(&[len], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::untraced();
        let vars = w.to_vars(&tape, false);
        let meta = enc.hpe(&vars, tape.constant(make_repr_seq(&g)?))?;
        let e = enc.spe(&vars, meta)?;
        println!(
            "len {len:>5}: pooling levels {}  meta-tokens {:?}  encoding {:?}  |e| {:.4}",
            cfg.pooling_levels(len),
            meta.shape(),
            e.shape(),
            e.value().norm_sq().sqrt()
        );
    }
    Ok(())
}
