//! Reward pieces: sampled Recall@1, ROC-AUC with ties, and the cost penalty.

use nis::reward::{cost_loss, reward, roc_auc, sampled_recall_at_1};

fn main() {
    println!("recall, label beats all: {}", sampled_recall_at_1(2.0, &[1.0, 0.5, 1.9]));
    println!("recall, tie counts as a miss: {}", sampled_recall_at_1(2.0, &[1.0, 2.0]));

    let scores = [0.9, 0.8, 0.8, 0.3, 0.1];
    let labels = [true, false, true, false, false];
    println!("AUC: {:?}", roc_auc(&scores, &labels));
    println!("AUC, one class: {:?}", roc_auc(&scores, &[true; 5]));

    for cost in [6000, 8000, 9000, 16000] {
        let cl = cost_loss(cost, 8000);
        println!("cost {cost}: penalty {cl:.3}, reward at objective 0.5 = {:.3}", reward(0.5, cl));
    }
}
