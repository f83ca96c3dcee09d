//! Melody metrics on a reference and a few distortions of it.

use tunesmith::eval_metrics::{apd, distribution_similarity, dtw, evaluate_corpus, ffe, melody_distance, td, Attribute, EvalOptions, EvalPair};
use tunesmith::melody::MidiSequence;
use tunesmith::pipeline::gt_f0;

fn main() -> tunesmith::Result<()> {
    let gt = MidiSequence::from_pairs(&[(60, 20), (62, 10), (64, 10), (65, 20), (67, 40), (65, 10), (64, 10), (60, 40)])?;
    let variants = [
        ("itself", gt.clone()),
        ("up a tone", gt.transpose(2)?),
        ("twice as slow", MidiSequence::from_pairs(&gt.pairs().iter().map(|&(p, d)| (p as i32, d * 2)).collect::<Vec<_>>())?),
        ("monotone", MidiSequence::from_pairs(&[(60, 160)])?),
    ];

    println!("{:<14} {:>6} {:>6} {:>5} {:>5} {:>6} {:>5}", "", "APD", "TD", "PD", "DD", "MD", "FFE");
    for (name, pred) in &variants {
        let (gf, gv) = gt_f0(&gt);
        let (pf, pv) = gt_f0(pred);
        let n = gf.len().min(pf.len());
        println!(
            "{name:<14} {:>6.2} {:>6.2} {:>5.2} {:>5.2} {:>6.2} {:>5.2}",
            apd(&gt, pred)?,
            td(&gt, pred),
            distribution_similarity(&gt, pred, Attribute::Pitch),
            distribution_similarity(&gt, pred, Attribute::Duration),
            melody_distance(&gt, pred)?,
            ffe(&gf[..n], &gv[..n], &pf[..n], &pv[..n])?,
        );
    }

    let (cost, path) = dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0])?;
    println!("\nDTW of a stretched track: cost {cost}, path length {path}");

    let pairs: Vec<EvalPair> = variants
        .iter()
        .map(|(name, pred)| EvalPair { id: name.to_string(), gt: gt.clone(), pred: pred.clone(), key: None, tempo_bpm: 120.0, f0: None })
        .collect();
    for rounded in [false, true] {
        print!("{}", evaluate_corpus(&pairs, EvalOptions { rounded })?.table("variants"));
    }
    Ok(())
}
