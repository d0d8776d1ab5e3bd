//! Classical MDS: recover planar coordinates from a distance matrix, and
//! report how far a non-Euclidean matrix is from an embedding.

use mprlab::distmath::{classical_mds, pairwise_distances};
use ndarray::array;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let square = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
    let emb = classical_mds(pairwise_distances(&square).view(), 2)?;
    println!("unit square, recovered up to rotation:");
    for p in &emb.points {
        println!("  ({:+.4}, {:+.4})", p[0], p[1]);
    }
    println!("  eigenvalues {:.4?}", emb.eigenvalues);

    // Violates the triangle inequality, so no Euclidean embedding exists.
    let bad = array![[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]];
    let emb = classical_mds(bad.view(), 2)?;
    println!("triangle-violating matrix: negative eigenvalue mass {:.3}, non-Euclidean: {}", emb.negative_mass, emb.is_non_euclidean());
    Ok(())
}
