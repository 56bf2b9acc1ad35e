"""
This is the main module, from which the whole pipeline is driven: dataset generation, classifier
and diffusion training, guided sampling, evaluation and the identity self test.
"""

import functools
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np
import torch
from tqdm import tqdm

import io_handler
from config import load_config, with_overrides
from derivation_checks import run_identity_suite
from diffusion import NoiseStream
from errors import EXIT_NUMERICAL, ConfigError, GlideError, error_kind, exit_code_for
from guidance import check_models, null_condition, sample_guided
from metrics import compare_runs, evaluate_samples, length_edges, angle_edges
from molsys import AtomCountPrior, sample_atom_count
from oracle import generate_dataset, pseudo_affinity, qed_proxy, sa_proxy
from plots import histogram_figure, metric_figure, write_figure
from schedule import schedule_from_config
from training import is_validation, train_cfg_diffusion, train_classifier, train_diffusion

logger = logging.getLogger(__name__)

MODE_NAMES = {
    "none": "none",
    "classifier": "classifier",
    "cfg": "classifier_free",
    "multi": "multi_constraint",
    "conditional": "conditional",
}
MANIFEST = "manifest.jsonl"


def handles_errors(command):
    """
    Turns exceptions into a JSON error line on stderr and the matching exit code.
    """

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (GlideError, OSError, ValueError, ArithmeticError) as e:
            click.echo(json.dumps({"error": error_kind(e), "message": str(e)}), err=True)
            sys.exit(exit_code_for(e))

    return wrapper


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Guided ligand diffusion in a fixed pocket."""

    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    # single intra-op thread keeps floating point reductions in a fixed order
    torch.set_num_threads(1)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="JSON run config or a sampling manifest.")
threads_option = click.option("--threads", type=int, default=1, envvar="GLIDE_THREADS", show_default=True,
                              help="Worker threads.")


@cli.command()
@config_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--n", "n_complexes", type=int, default=None)
@click.option("--seed", type=int, default=None)
@threads_option
@handles_errors
def gen(config_path, out_dir, n_complexes, seed, threads):
    """Generate a labeled synthetic dataset with train and test splits."""

    cfg = load_config(config_path, {"n_complexes": n_complexes, "seed": seed, "paths.dataset": out_dir})
    out = Path(cfg.paths.dataset)
    records = generate_dataset(cfg.seed, cfg.n_complexes, cfg.gen, cfg.oracle, threads)
    test = [r for i, r in enumerate(records) if is_validation(i, cfg.gen.test_fraction)]
    train = [r for i, r in enumerate(records) if not is_validation(i, cfg.gen.test_fraction)]
    io_handler.save_split(out / "train", train)
    io_handler.save_split(out / "test", test)
    io_handler.save_prior(out / io_handler.PRIOR_FILE, AtomCountPrior.fit(train))
    masked = sum(r.is_masked for r in records)
    click.echo(json.dumps({"train": len(train), "test": len(test), "masked": masked, "out": str(out)}))


def _load_train(cfg, dataset):
    root = Path(dataset or cfg.paths.dataset)
    return io_handler.load_split(root / "train", cfg.gen.elements)


@cli.command("train-classifier")
@config_option
@click.option("--dataset", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--multi", is_flag=True, help="Train the three output (affinity, qed, sa) head.")
@click.option("--noise-mode", type=click.Choice(["clean_x0", "noisy_xt"]), default=None)
@click.option("--loss-kind", type=click.Choice(["mse", "mae"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handles_errors
def train_classifier_cmd(config_path, dataset, out_ckpt, multi, noise_mode, loss_kind, epochs, seed):
    """Train the property regressor used for classifier guidance."""

    cfg = load_config(config_path, {
        "classifier.out_dim": 3 if multi else None,
        "training.classifier_noise_mode": noise_mode,
        "training.loss_kind": loss_kind,
        "training.epochs": epochs,
        "training.seed": seed,
    })
    records = _load_train(cfg, dataset)
    sched = schedule_from_config(cfg.schedule)
    params, log = train_classifier(records, cfg.classifier, cfg.training, sched=sched)
    io_handler.save_checkpoint(out_ckpt, params)
    io_handler.write_train_log(Path(out_ckpt).with_suffix(".log.csv"), log)
    click.echo(json.dumps({"checkpoint": str(out_ckpt), "sha256": params.content_hash}))


@cli.command("train-diffusion")
@config_option
@click.option("--dataset", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--cfg-mode", is_flag=True, help="Train with condition dropout for classifier-free guidance.")
@click.option("--p-uncond", type=float, default=None)
@click.option("--null-condition", "null_cond", type=click.Choice(["mask", "sentinel"]), default=None,
              help="Null condition substituted on dropout; sampling must use the same one.")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handles_errors
def train_diffusion_cmd(config_path, dataset, out_ckpt, cfg_mode, p_uncond, null_cond, epochs, seed):
    """Train the denoiser, unconditional or with condition dropout."""

    cfg = load_config(config_path, {
        "denoiser.cond_channels": 2 if cfg_mode else None,
        "training.p_unconditional": p_uncond,
        "guidance.null_condition": null_cond,
        "training.epochs": epochs,
        "training.seed": seed,
    })
    records = _load_train(cfg, dataset)
    sched = schedule_from_config(cfg.schedule)
    if cfg_mode:
        null = null_condition(cfg.guidance)
        params, log = train_cfg_diffusion(records, cfg.denoiser, cfg.training, sched, null=null)
    else:
        params, log = train_diffusion(records, cfg.denoiser, cfg.training, sched)
    io_handler.save_checkpoint(out_ckpt, params)
    io_handler.write_train_log(Path(out_ckpt).with_suffix(".log.csv"), log)
    click.echo(json.dumps({"checkpoint": str(out_ckpt), "sha256": params.content_hash}))


def _run_chain(task, denoiser, classifier, sched, cfg, prior):
    pocket_idx, pocket_id, pocket, chain = task
    stream = NoiseStream(cfg.seed, pocket_idx, chain)
    if cfg.sampling.n_atoms is not None:
        n_atoms = cfg.sampling.n_atoms
    else:
        n_atoms = sample_atom_count(prior, pocket, stream.numpy_rng())
    frames = []

    def keep(state):
        if cfg.sampling.save_trajectory and (state.t % cfg.sampling.trajectory_every == 0 or state.t == 0):
            frames.append((state.t, state.x_t.numpy() + pocket.center, state.v_t.numpy()))

    molecule = sample_guided(denoiser, classifier, pocket, n_atoms, sched, cfg.guidance, stream, on_step=keep)
    return stream.seed, molecule, frames


def _write_run(out, tasks, results, cfg, pocket_files):
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"kind": "run", "config": cfg.model_dump(mode="json")}]
    for (pocket_idx, pocket_id, pocket, chain), (chain_seed, molecule, frames) in zip(tasks, results):
        mol_id = f"{pocket_id}_{chain:04d}"
        path = out / f"{mol_id}.xyz"
        final_t = cfg.schedule.T - (cfg.guidance.stop_at_step or cfg.schedule.T)
        io_handler.write_xyz(path, molecule, {"id": mol_id, "source": "sample", "t": max(final_t, 0)})
        if frames:
            elements = molecule.elements
            io_handler.write_trajectory(out / f"{mol_id}.traj.xyz", [
                ([elements[i] for i in v.argmax(axis=1)], x, {"id": mol_id, "source": "trajectory", "t": t})
                for t, x, v in frames
            ])
        rows.append({
            "kind": "molecule",
            "id": mol_id,
            "pocket": pocket_id,
            "pocket_file": str(Path(pocket_files[pocket_idx]).resolve()),
            "file": path.name,
            "chain": chain,
            "chain_seed": chain_seed,
            "mode": cfg.guidance.mode,
            "s": cfg.guidance.s,
            "target": cfg.guidance.target_deltaG,
            "n_atoms": molecule.n_atoms,
            "pseudo_affinity": pseudo_affinity(pocket, molecule, cfg.oracle)[0],
            "qed": qed_proxy(molecule),
            "sa": sa_proxy(molecule),
            "sha256": _sha256(path),
        })
    io_handler.write_jsonl(out / MANIFEST, rows)


@cli.command()
@config_option
@click.option("--denoiser", "denoiser_ckpt", type=click.Path(exists=False, dir_okay=False), required=True)
@click.option("--classifier", "classifier_ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--pocket", "pocket_files", multiple=True, required=True, type=click.Path(dir_okay=False),
              help="Pocket XYZ file, repeatable.")
@click.option("--mode", type=click.Choice(sorted(MODE_NAMES)), default=None)
@click.option("--s", "scales", type=float, multiple=True, help="Guidance scale, repeatable for sweeps.")
@click.option("--target", "targets", type=float, multiple=True,
              help="Target binding energy in kcal/mol, repeatable for context sweeps.")
@click.option("--targets-multi", type=float, nargs=3, default=None, help="Multi-constraint targets (dG, qed, sa).")
@click.option("--weights-multi", type=float, nargs=3, default=None, help="Multi-constraint weights (dG, qed, sa).")
@click.option("--clip", type=float, default=None)
@click.option("--clip-mode", type=click.Choice(["elementwise", "norm"]), default=None)
@click.option("--stop-at-step", type=int, default=None, help="Number of reverse steps to run.")
@click.option("--n-per-pocket", type=int, default=None)
@click.option("--n-atoms", type=int, default=None, help="Fixed ligand size instead of the prior.")
@click.option("--prior", "prior_path", type=click.Path(dir_okay=False), default=None)
@click.option("--type-sampling", type=click.Choice(["argmax", "stochastic"]), default=None)
@click.option("--loss-kind", type=click.Choice(["gaussian", "exponential"]), default=None)
@click.option("--grad-path", type=click.Choice(["approx_identity", "full_chain"]), default=None)
@click.option("--classify-on", type=click.Choice(["x0_hat", "x_t"]), default=None)
@click.option("--classifier-types", type=click.Choice(["onehot", "simplex"]), default=None)
@click.option("--null-condition", "null_cond", type=click.Choice(["mask", "sentinel"]), default=None)
@click.option("--null-sentinel", type=float, default=None)
@click.option("--check-identities", is_flag=True, help="Verify the guided mean identity at every step.")
@click.option("--save-trajectory", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@threads_option
@handles_errors
def sample(config_path, denoiser_ckpt, classifier_ckpt, pocket_files, mode, scales, targets, targets_multi,
           weights_multi, clip, clip_mode, stop_at_step, n_per_pocket, n_atoms, prior_path, type_sampling, loss_kind,
           grad_path, classify_on, classifier_types, null_cond, null_sentinel, check_identities, save_trajectory,
           seed, out_dir, threads):
    """
    Sample ligands for pockets. Several scales or targets sweep their grid, one s_<s> and/or
    target_<c> subdirectory per run.
    """

    cfg = load_config(config_path, {
        "guidance.mode": MODE_NAMES[mode] if mode else None,
        "guidance.targets_multi": targets_multi,
        "guidance.weights_multi": weights_multi,
        "guidance.clip": clip,
        "guidance.clip_mode": clip_mode,
        "guidance.stop_at_step": stop_at_step,
        "guidance.type_sampling": type_sampling,
        "guidance.loss_kind": loss_kind,
        "guidance.grad_path": grad_path,
        "guidance.classify_on": classify_on,
        "guidance.classifier_types": classifier_types,
        "guidance.null_condition": null_cond,
        "guidance.null_sentinel": null_sentinel,
        "guidance.check_identities": True if check_identities else None,
        "sampling.n_per_pocket": n_per_pocket,
        "sampling.n_atoms": n_atoms,
        "sampling.save_trajectory": True if save_trajectory else None,
        "seed": seed,
        "paths.samples": out_dir,
    })
    k = len(cfg.gen.elements)
    # train-diffusion --cfg-mode and train-classifier --multi set these on top of the config file
    expected_denoiser = cfg.denoiser
    if cfg.guidance.uses_condition:
        expected_denoiser = expected_denoiser.model_copy(update={"cond_channels": 2})
    expected_classifier = cfg.classifier
    if cfg.guidance.mode == "multi_constraint":
        expected_classifier = expected_classifier.model_copy(update={"out_dim": 3})

    denoiser = io_handler.load_checkpoint(denoiser_ckpt, role="denoiser", num_types=k, expected=expected_denoiser)
    classifier = None
    if cfg.guidance.uses_classifier:
        if classifier_ckpt is None:
            raise ConfigError(f"mode {cfg.guidance.mode} needs --classifier")
        classifier = io_handler.load_checkpoint(classifier_ckpt, role="regressor", num_types=k,
                                                expected=expected_classifier)
    elif classifier_ckpt is not None:
        logger.warning("mode %s ignores the classifier checkpoint", cfg.guidance.mode)

    prior = None
    if cfg.sampling.n_atoms is None:
        prior = io_handler.load_prior(prior_path or Path(cfg.paths.dataset) / io_handler.PRIOR_FILE)

    pockets = []
    for index, path in enumerate(pocket_files):
        pocket, meta = io_handler.read_pocket(path, cfg.gen.elements)
        pocket_id = meta.get("id") or Path(path).stem.removesuffix("_pocket")
        pockets.append((index, pocket_id, pocket))
    tasks = [(i, pid, p, chain) for i, pid, p in pockets for chain in range(cfg.sampling.n_per_pocket)]

    sched = schedule_from_config(cfg.schedule)
    check_models(denoiser, classifier, cfg.guidance)
    # torch modules are built once here and then shared read-only by the worker threads
    for params in (denoiser, classifier):
        if params is not None:
            params.module
    scale_list = list(scales) or [cfg.guidance.s]
    target_list = list(targets) or [cfg.guidance.target_deltaG]
    root = Path(cfg.paths.samples)
    for s in scale_list:
        for c in target_list:
            run_cfg = with_overrides(cfg, {"guidance.s": s, "guidance.target_deltaG": c})
            out = root
            if len(scale_list) > 1:
                out = out / f"s_{s:g}"
            if len(target_list) > 1:
                out = out / f"target_{c:g}"
            run = functools.partial(_run_chain, denoiser=denoiser, classifier=classifier, sched=sched, cfg=run_cfg,
                                    prior=prior)
            with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
                results = list(tqdm(pool.map(run, tasks), total=len(tasks), desc=f"s={s:g} c={c:g}", disable=None))
            _write_run(out, tasks, results, run_cfg, pocket_files)
            logger.info("wrote %d molecules for s=%g, target %g to %s", len(results), s, c, out)
    runs = len(scale_list) * len(target_list)
    click.echo(json.dumps({"runs": runs, "molecules": len(tasks) * runs, "out": str(root)}))


def load_run(run_dir, elements):
    """
    Molecules and pockets of a sampled run.

    Returns
    -------
    list of tuple
        (molecule id, pocket id, MoleculeCloud).
    dict
        Pocket id to PocketCloud.
    """

    run_dir = Path(run_dir)
    samples, pockets = [], {}
    for row in io_handler.read_jsonl(run_dir / MANIFEST):
        if row["kind"] != "molecule":
            continue
        molecule, _ = io_handler.read_molecule(run_dir / row["file"], elements)
        if row["pocket"] not in pockets:
            pockets[row["pocket"]] = io_handler.read_pocket(row["pocket_file"], elements)[0]
        samples.append((row["id"], row["pocket"], molecule))
    return samples, pockets


def load_reference(ref_dir, elements):
    """Reference ligands from a sampled run or from a dataset split."""

    ref_dir = Path(ref_dir)
    if (ref_dir / MANIFEST).exists():
        return [mol for _, _, mol in load_run(ref_dir, elements)[0]]
    return [record.ligand for record in io_handler.load_split(ref_dir, elements)]


def _write_histograms(out, hists, rows, baseline_rows):
    fields = ["bin_left", "bin_right", "sampled", "reference"]
    for name, (sampled, reference) in hists.items():
        edges = length_edges() if name.startswith("length") else angle_edges()
        table = [
            {"bin_left": edges[i], "bin_right": edges[i + 1],
             "sampled": None if sampled is None else sampled[i],
             "reference": None if reference is None else reference[i]}
            for i in range(len(edges) - 1)
        ]
        io_handler.write_csv(out / f"hist_{name}.csv", table, fields)
        write_figure(histogram_figure(name, edges, sampled, reference), out / f"hist_{name}.html", name)
    for key in ("pseudo_affinity", "clash", "qed", "sa"):
        baseline = None if baseline_rows is None else [r[key] for r in baseline_rows]
        write_figure(metric_figure(key, [r[key] for r in rows], baseline), out / f"metric_{key}.html", key)


@cli.command("eval")
@config_option
@click.option("--samples", "samples_dir", type=click.Path(file_okay=False), required=True)
@click.option("--reference", "reference_dir", type=click.Path(file_okay=False), required=True)
@click.option("--baseline-dir", type=click.Path(file_okay=False), default=None,
              help="Unguided run on the same pockets for the statistical comparison.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@handles_errors
def eval_cmd(config_path, samples_dir, reference_dir, baseline_dir, out_dir):
    """Evaluate a sampled run: metrics JSON and CSV plus histogram dumps and plots."""

    cfg = load_config(config_path, {"paths.reports": out_dir})
    elements = cfg.gen.elements
    samples, pockets = load_run(samples_dir, elements)
    if not samples:
        raise ConfigError(f"{samples_dir} holds no molecules")
    reference = load_reference(reference_dir, elements)
    rows, report, hists = evaluate_samples(samples, pockets, reference, cfg.eval, cfg.oracle)

    baseline_rows = None
    if baseline_dir is not None:
        base_samples, base_pockets = load_run(baseline_dir, elements)
        baseline_rows, _, _ = evaluate_samples(base_samples, base_pockets, reference, cfg.eval, cfg.oracle)
        report["comparison"] = compare_runs(rows, baseline_rows)

    out = Path(cfg.paths.reports)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    io_handler.write_csv(out / "molecules.csv", rows, ["id", "pocket", "pseudo_affinity", "qed", "sa", "clash", "valid"])
    _write_histograms(out, hists, rows, baseline_rows)
    click.echo(json.dumps({"molecules": len(rows), "out": str(out)}))


@cli.command()
@click.option("--worlds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handles_errors
def selftest(worlds, seed):
    """Run the analytic identity checks; exits nonzero if any fails."""

    results = run_identity_suite(n_worlds=worlds, seed=seed)
    failed = [r._asdict() for r in results if not r.passed]
    worst = max(r.deviation for r in results)
    click.echo(json.dumps({"checks": len(results), "failed": failed, "max_deviation": worst}))
    if failed:
        sys.exit(EXIT_NUMERICAL)


if __name__ == "__main__":
    cli()
