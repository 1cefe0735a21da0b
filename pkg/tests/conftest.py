import time
from dataclasses import replace

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from carsr.degradation import (
    DegradeSpec,
    bicubic_upscale,
    build_manifest,
    materialize_entry,
)
from carsr.fixtures import write_fixture_corpus
from carsr.metrics import psnr_y
from carsr.model import ModelConfig
from carsr.training import LossReport, TrainConfig, desk_preset, train_loop


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Five synthetic 160x160 source images; training-set material."""
    d = tmp_path_factory.mktemp("fixtures")
    write_fixture_corpus(d, 5, 160, 160, seed=0)
    return d


@pytest.fixture(scope="session")
def eval_dir(tmp_path_factory):
    """Five smaller synthetic images used as an evaluation set."""
    d = tmp_path_factory.mktemp("evalset")
    write_fixture_corpus(d, 5, 96, 96, seed=50)
    return d


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, fixture_dir):
    """A quick 20-iteration run of a small model; provides a real
    checkpoint and log for CLI and checkpoint tests."""
    run_dir = tmp_path_factory.mktemp("tiny_run")
    spec = DegradeSpec()
    manifest = build_manifest(fixture_dir, spec, seed=21, count=8, patch=64)
    model_cfg = ModelConfig(n_f=8, num_rrdb=1)
    train_cfg = TrainConfig(
        batch_size=2,
        hr_patch=64,
        total_iters=20,
        restart_period=10,
        checkpoint_interval=10,
        seed=21,
    )
    result = train_loop(manifest, model_cfg, train_cfg, run_dir, fixture_dir)
    return {
        "model": result.model,
        "model_cfg": model_cfg,
        "train_cfg": train_cfg,
        "manifest": manifest,
        "checkpoint": result.final_checkpoint,
        "log_path": result.log_path,
        "run_dir": run_dir,
        "source_dir": fixture_dir,
    }


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory, fixture_dir):
    """The desk-preset overfit on 8 fixed patch pairs.

    Trains in 100-iteration bursts and stops as soon as the convergence
    criteria hold (training L1 down 90% from its first-iteration value
    and luma PSNR at least 1 dB above the bicubic baseline), with the
    2000-iteration desk budget as the hard cap. Several tests share the
    resulting model, so this runs once per session.
    """
    run_dir = tmp_path_factory.mktemp("overfit")
    spec = DegradeSpec(fixed_qf=10)
    manifest = build_manifest(fixture_dir, spec, seed=9, count=8, patch=64)
    items = [materialize_entry(e, spec, manifest.patch, fixture_dir) for e in manifest.entries]
    pairs = [(f"patch_{i}", lr, hr) for i, (lr, hr, _) in enumerate(items)]
    lr_batch = torch.from_numpy(np.stack([lr for _, lr, _ in pairs]))
    hr_batch = torch.from_numpy(np.stack([hr for _, _, hr in pairs]))
    baseline_psnr = float(
        np.mean([psnr_y(bicubic_upscale(lr, 4), hr) for _, lr, hr in pairs])
    )
    # lr_init raised above the large-corpus default: with 8 memorized
    # patches the schedule can afford to move fast, and the desk budget
    # of 2000 iterations is tight at 2e-4.
    model_cfg, train_cfg = desk_preset(
        ModelConfig(), TrainConfig(seed=9, hr_patch=64, lr_init=1e-3)
    )

    def probe(model):
        with torch.no_grad():
            out = model(lr_batch)
        l1 = float((out - hr_batch).abs().mean())
        ps = float(
            np.mean(
                [
                    psnr_y(np.clip(out[i].numpy(), 0.0, 1.0), pairs[i][2])
                    for i in range(len(pairs))
                ]
            )
        )
        return l1, ps

    start = time.time()
    first_l1 = None
    iters_done = 0
    model = None
    while iters_done < train_cfg.total_iters:
        result = train_loop(
            manifest,
            model_cfg,
            train_cfg,
            run_dir,
            fixture_dir,
            resume=iters_done > 0,
            max_steps=100,
        )
        model = result.model
        iters_done += 100
        if first_l1 is None:
            line = result.log_path.read_text().splitlines()[0]
            first_l1 = LossReport.from_json_line(line).l_hr
        l1, ps = probe(model)
        # stop with some slack beyond the documented thresholds so the
        # assertions downstream are not riding the edge
        if l1 <= 0.08 * first_l1 and ps >= baseline_psnr + 1.25:
            break
    final_l1, final_psnr = probe(model)
    return {
        "model": model,
        "model_cfg": model_cfg,
        "train_cfg": train_cfg,
        "manifest": manifest,
        "pairs": pairs,
        "baseline_psnr": baseline_psnr,
        "first_l1": first_l1,
        "final_l1": final_l1,
        "final_psnr": final_psnr,
        "iterations": iters_done,
        "seconds": time.time() - start,
        "run_dir": run_dir,
        "source_dir": fixture_dir,
    }
