from sair.config import load_config


def tiny_config(**overrides):
    """Seconds-scale variant of the desk recipe."""
    base = {
        "name": "tiny",
        "dataset.image_size": 16,
        "dataset.toy_train_size": 8,
        "dataset.toy_test_size": 4,
        "model.app_width": 4,
        "model.app_resblocks": 1,
        "model.sem_channels": 8,
        "model.sem_width": 8,
        "model.sem_context_layers": 1,
        "model.mlp_hidden": 16,
        "model.mlp_depth": 2,
        "optim.epochs": 2,
        "optim.batch_size": 4,
        "optim.query_count": 64,
        "optim.checkpoint_every": 1,
        "semantic_pretrain.epochs": 1,
    }
    base.update(overrides)
    return load_config("desk_toy").replace(**base)
