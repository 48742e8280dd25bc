import io

import pytest

from exfilpipe import binfmt, classifier, cli, features, synth


@pytest.fixture(scope="session")
def demo_tree(tmp_path_factory):
    """Demo binary plus its runtime artifact directory."""
    root = tmp_path_factory.mktemp("demo")
    return synth.write_demo_artifacts(root)


@pytest.fixture(scope="session")
def demo_image(demo_tree):
    return binfmt.load_binary(demo_tree["binary"])


@pytest.fixture(scope="session")
def fast_embedding():
    # small walk budget keeps featurization cheap in tests
    return features.EmbeddingConfig(walks_per_node=2, walk_length=10,
                                    window=3, seed=0, power_iterations=10)


@pytest.fixture(scope="session")
def small_model(fast_embedding):
    """A 15-tree forest over the synthetic two-cluster data."""
    ds = synth.two_cluster_dataset(n=96, seed=3)
    hp = classifier.Hyperparams(n_trees=15, seed=3)
    return classifier.train_forest(ds, hp, embedding=fast_embedding)


@pytest.fixture(scope="session")
def small_model_path(small_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.json"
    buf = io.StringIO()
    classifier.save_model(small_model, buf)
    path.write_text(buf.getvalue())
    return path


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Manifest of synthetic binaries plus a model trained through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    bins = root / "bins"
    bins.mkdir()
    lines = []
    for i in range(16):
        label = "exfiltrator" if i % 2 == 0 else "non_exfiltrator"
        p = bins / f"s{i:02d}.elf"
        p.write_bytes(synth.make_sample_binary(label, i))
        lines.append(f"{label}\t{p}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    config = root / "train.cfg"
    config.write_text("walks_per_node = 2\nwalk_length = 10\nwindow = 3\n"
                      "power_iterations = 10\nn_trees = 15\n")
    out = root / "out"
    rc = cli.main(["train", str(manifest), "--config", str(config),
                   "--out", str(out), "--seed", "5"])
    assert rc == 0, "training through the CLI failed"
    return {"root": root, "manifest": manifest, "config": config,
            "out": out, "model": out / "model.json"}
