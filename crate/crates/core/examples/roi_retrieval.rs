//! Greedy patch retrieval on a hand-written saliency map.

use gmic::roi::{self, Grid};

fn main() -> gmic::Result<()> {
    let benign = Grid::new(4, 4, vec![
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 2.0,
        0.0, 0.0, 2.0, 0.0,
    ])?;
    let malignant = Grid::zeros(4, 4);
    // An 8x8 image seen through a 4x4 map: each cell covers 2x2 pixels.
    let image: Vec<u8> = (0..64).collect();
    let picks = roi::retrieve_rois(&image, (8, 8), &[benign, malignant], 3, (4, 4))?;
    for p in &picks {
        println!(
            "rank {}: cells ({}, {}) {}x{}, criterion {:.2}, pixels at ({}, {}) -> {:?}",
            p.rank, p.window.i, p.window.j, p.window.height, p.window.width, p.criterion, p.rect.y, p.rect.x, &p.patch[..4]
        );
    }
    println!("{}", roi::proposals_json(&picks));

    // With nothing to go on, the windows walk the map in row-major order.
    let flat = roi::greedy_windows(&Grid::zeros(4, 4), 2, 2, 3)?;
    let positions: Vec<_> = flat.iter().map(|(w, _)| (w.i, w.j)).collect();
    println!("flat map: {positions:?}");
    Ok(())
}
