//! Compares the tree partition function against explicit enumeration of
//! every root-to-leaf path, and checks that the path probabilities sum to 1.
//!
//! cargo run -p hmcgeo-core --example path_softmax

use hmcgeo::loss::{path_marginals, path_partition, pc_loss};
use hmcgeo::{HierarchyTree, LabelVector, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let tree = HierarchyTree::from_parents(vec![2, 4, 8], &[vec![0, 0, 1, 1], vec![0, 0, 1, 2, 2, 2, 3, 3]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<f64> = (0..tree.total_regions()).map(|_| rng.random_range(-2.0..2.0)).collect();

    let paths: Vec<Vec<usize>> = (0..tree.leaf_count()).map(|leaf| tree.path(leaf)).collect();
    let path_scores: Vec<f64> = paths
        .iter()
        .map(|p| p.iter().enumerate().map(|(g, &r)| scores[tree.global_id(g, r)]).sum())
        .collect();
    let m = path_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let brute = m + path_scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let dp = path_partition(&scores, &tree)?;

    println!("leaf  path       score      exp(score - log Z)  exp(-pc_loss)");
    for (leaf, (path, s)) in paths.iter().zip(&path_scores).enumerate() {
        let lv = LabelVector::new(path.clone(), &tree)?;
        let via_loss = (-pc_loss(&scores, &lv, &tree)?).exp();
        let shown = format!("{path:?}");
        println!("{leaf:>4}  {shown:<9}  {s:>9.6}  {:>18.15}  {via_loss:>13.15}", (s - brute).exp());
    }
    println!();
    println!("log Z by enumeration       {brute:.15}");
    println!("log Z by tree recursion    {dp:.15}");
    println!("difference                 {:.3e}", (brute - dp).abs());

    let total: f64 = path_scores.iter().map(|s| (s - dp).exp()).sum();
    println!("sum of path probabilities  {total:.15}");
    let marg = path_marginals(&scores, &tree)?;
    let leaf_mass: f64 = marg[tree.offset(2)..].iter().sum();
    println!("sum of leaf marginals      {leaf_mass:.15}");
    Ok(())
}
