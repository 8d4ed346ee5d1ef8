//! Synthetic inputs shared by the benchmarks.

use classim_core::rng::SplitMix64;
use classim_core::{ResponseMatrix, SkillLevel};

/// Rasch-generated matrix with the default skill mix and `items` centered
/// difficulties on a grid from -2 to 2.
pub fn rasch_matrix(students: usize, items: usize, seed: u64) -> ResponseMatrix {
    let beta = [-1.0, -0.3, 0.6, 1.3];
    let counts = classim_core::allocate_counts(students, &Default::default()).expect("valid mix");
    let skills: Vec<SkillLevel> = counts
        .iter()
        .flat_map(|(level, n)| std::iter::repeat_n(*level, *n))
        .collect();
    let delta: Vec<f64> = (0..items)
        .map(|i| -2.0 + 4.0 * i as f64 / (items.max(2) - 1) as f64)
        .collect();
    let mut rng = SplitMix64::new(seed);
    let mut cells = Vec::with_capacity(students * items);
    for skill in &skills {
        for d in &delta {
            let p = 1.0 / (1.0 + (d - beta[skill.index()]).exp());
            cells.push(Some(rng.next_f64() < p));
        }
    }
    ResponseMatrix::new(
        (0..items).map(|i| format!("item-{i:04}")).collect(),
        skills.into_iter().enumerate().collect(),
        cells,
    )
}
