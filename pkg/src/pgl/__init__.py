"""Progressive graph learning for open-set domain adaptation on feature vectors.

Modules
-------
autodiff, params, optim, gradcheck
    Reverse-mode differentiation, parameter sets, Adam, gradient checking.
data
    Feature records and files, synthetic open-set data, video frame pooling.
gnn
    Backbone, edge/node networks, classifier, discriminator, checkpoints.
losses
    Focal node loss, edge BCE, adversarial, weighted node, CE, entropy.
pseudolabel
    Global-rank and balanced (label-bank) progressive pseudo-labeling.
episodic
    Episode samplers for initial, mix-up and source-free training.
metrics
    OS, OS*, UNK, H, ECE and reliability bins.
driver
    PGL and SF-PGL runs, source pre-training, evaluation.
"""
__version__ = "0.1.0"
