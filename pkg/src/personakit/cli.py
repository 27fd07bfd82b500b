"""Command-line orchestration for reproducible end-to-end runs.

Subcommands (inputs are passed to --input in the documented order):

    gen               [--config] --output DIR
    ingest            --input EVENTS CATALOG --output AGGREGATES
    featurize         --input AGGREGATES --output DIR
    train             --input FEATURES LABELS NORMALIZER AGGREGATES --output DIR
    baseline          --input FEATURES --output ASSIGNMENTS
    assign            --input ARTIFACT FEATURES --output ASSIGNMENTS
    profiles          --input ARTIFACT FEATURES LABELS AGGREGATES --output JSON
    distribution      --input ARTIFACT FEATURES LABELS AGGREGATES --output DIR
    eval-clusters     --input FEATURES LABELS ASSIGNMENTS --output DIR
    eval-alignment    --input ARTIFACT FEATURES LABELS AGGREGATES --output DIR
    eval-separation   --input ARTIFACT FEATURES LABELS AGGREGATES --output DIR
    traces            --input EVENTS ARTIFACT FEATURES --output NDJSON --stage N

Every subcommand honors --config (TOML) and --seed; evaluation commands
write JSON + TSV reports and a PNG figure next to them. Exit codes:
0 success, 2 usage error, 3 corrupt/mismatched file formats, 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import PersonaKitError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="personakit",
        description="clickstream logs -> buyer features -> persona codebook -> evaluations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, n_inputs: int | None, needs_output: bool = True, **extra):
        p = sub.add_parser(name, help=extra.pop("help", None))
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if n_inputs:
            p.add_argument("--input", nargs="+", required=True, metavar="PATH")
        if needs_output:
            p.add_argument("--output", required=True, metavar="PATH")
        p.add_argument("--threads", type=int, help="BLAS thread cap")
        p.add_argument("--verbose", action="store_true")
        for flag, kwargs in extra.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kwargs)
        p.set_defaults(handler=handler, n_inputs=n_inputs)
        return p

    add("gen", _cmd_gen, None, help="generate a synthetic population")
    add("ingest", _cmd_ingest, 2, help="events + catalog -> buyer-shop aggregates")
    add("featurize", _cmd_featurize, 1, help="aggregates -> features, labels, normalizer")
    add("train", _cmd_train, 4, help="train the persona codebook model")
    add("baseline", _cmd_baseline, 1, help="minibatch k-means baseline assignments")
    add("assign", _cmd_assign, 2, help="assign persona tokens with a trained artifact")
    add("profiles", _cmd_profiles, 4, help="export token profiles",
        reference={"choices": ["train", "all"], "default": "train"})
    add("distribution", _cmd_distribution, 4, help="population-distribution recovery report",
        reference={"choices": ["train", "all"], "default": "all"})
    add("eval-clusters", _cmd_eval_clusters, 3, help="cluster-quality report")
    add("eval-alignment", _cmd_eval_alignment, 4, help="conversion-alignment report",
        reference={"choices": ["train", "all"], "default": "all"})
    add("eval-separation", _cmd_eval_separation, 4, help="behavioral-separation report",
        reference={"choices": ["train", "all"], "default": "all"})
    add("traces", _cmd_traces, 3, help="emit SFT trace records",
        stage={"type": int, "choices": [1, 2], "default": 2})
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    expected = getattr(args, "n_inputs", None)
    if expected and len(args.input) != expected:
        parser.error(
            f"{args.command} expects {expected} --input paths, got {len(args.input)}"
        )
    try:
        args.handler(args)
        return 0
    except PersonaKitError as exc:
        _error_report(exc)
        return exc.exit_code
    except OSError as exc:
        _error_report(exc)
        return 1


def _error_report(exc: Exception) -> None:
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
    )


def _say(args, message: str) -> None:
    if args.verbose:
        print(message, file=sys.stderr)


def _load_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig.desk()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# pipeline stages


def _cmd_gen(args) -> None:
    from .config import dump_config
    from .events import event_to_json
    from .synthgen import PopulationConfig, default_population, generate

    cfg = _load_config(args)
    if cfg.population is not None:
        population = PopulationConfig.from_dict(cfg.population)
        population.seed = cfg.seed
    else:
        population = default_population(cfg.seed)
    cfg.population = population.as_dict()

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    events, catalog, truth = generate(population)
    with open(out / "events.ndjson", "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event_to_json(event) + "\n")
    with open(out / "catalog.bin", "wb") as fh:
        catalog.write(fh)
    with open(out / "ground_truth.tsv", "w", encoding="utf-8") as fh:
        fh.write("buyer_id\tshop_id\tarchetype\n")
        for buyer_id, shop_id, archetype in truth:
            fh.write(f"{buyer_id}\t{shop_id}\t{archetype}\n")
    with open(out / "config.toml", "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    print(f"wrote {len(events)} events for {len(truth)} buyers to {out}")


def _cmd_ingest(args) -> None:
    from .catalog import ProductCatalog
    from .events import aggregate, aggregate_to_json, read_events, sessionize

    events_path, catalog_path = args.input
    with open(catalog_path, "rb") as fh:
        catalog = ProductCatalog.read(fh)
    groups: dict[tuple[str, str], list] = {}
    with open(events_path, "r", encoding="utf-8") as fh:
        for event in read_events(fh):
            groups.setdefault((event.buyer_id, event.shop_id), []).append(event)
    dropped = 0
    with open(args.output, "w", encoding="utf-8") as fh:
        for key, group in groups.items():
            agg = aggregate(sessionize(group), catalog)
            dropped += agg.dropped_product_ids
            fh.write(aggregate_to_json(agg) + "\n")
    print(f"wrote {len(groups)} aggregates to {args.output} (dropped ids: {dropped})")


def _cmd_featurize(args) -> None:
    import numpy as np

    from .config import derive_rng
    from .events import read_aggregates
    from .features import assemble_matrix, fit_normalizer, write_features
    from .objective import build_labels, write_labels
    from .trainer import sample_dataset

    cfg = _load_config(args)
    with open(args.input[0], "r", encoding="utf-8") as fh:
        aggregates = read_aggregates(fh)
    strata_codes = _strata_codes(aggregates)
    shop_ids = [a.shop_id for a in aggregates]
    train_idx, _ = sample_dataset(
        shop_ids, strata_codes, cfg.trainer, derive_rng(cfg.seed, "train/split")
    )
    train_mask = np.zeros(len(aggregates), dtype=bool)
    train_mask[train_idx] = True
    _say(args, f"fitting normalizer on {train_idx.size} training rows")

    norm = fit_normalizer(
        [aggregates[i] for i in train_idx],
        pca_dim=cfg.features.pca_dim,
        logit_epsilon=cfg.features.logit_epsilon,
    )
    matrix, diagnostics = assemble_matrix(aggregates, norm)
    labels = build_labels(aggregates, train_mask)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.bin", "wb") as fh:
        write_features(matrix, fh)
    with open(out / "labels.tsv", "w", encoding="utf-8") as fh:
        write_labels(labels, fh)
    with open(out / "normalizer.json", "w", encoding="utf-8") as fh:
        fh.write(norm.to_json())
    if diagnostics:
        with open(out / "featurize_diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump(diagnostics, fh, indent=2, sort_keys=True)
    print(
        f"wrote {len(matrix)} feature rows (width {matrix.values.shape[1]}) to {out}; "
        f"skipped {len(diagnostics)}"
    )


def _cmd_train(args) -> None:
    from .artifact import build_artifact
    from .features import NormalizerState
    from .trainer import train_model

    cfg = _load_config(args)
    features_path, labels_path, normalizer_path, aggregates_path = args.input
    matrix = _read_matrix(features_path)
    labels = _read_labels(labels_path)
    with open(normalizer_path, "r", encoding="utf-8") as fh:
        norm = NormalizerState.from_json(fh.read())
    aggregates = _read_aggs(aggregates_path)

    result = train_model(matrix, labels, cfg)
    _say(args, f"trained {len(result.log)} steps; final active codes: "
               f"{result.log[-1]['active_codes'] if result.log else 'n/a'}")
    profiles = _profiles_over_rows(matrix, labels, aggregates,
                                   tokens=result.assignments, rows=result.train_idx)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    artifact = build_artifact(result.model, norm, cfg, profiles)
    with open(out / "artifact.bin", "wb") as fh:
        artifact.save(fh)
    with open(out / "train_log.ndjson", "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(
        f"wrote artifact ({len(artifact.tensors)} tensors, {len(profiles)} token profiles) "
        f"to {out}"
    )


def _cmd_baseline(args) -> None:
    from .config import derive_rng
    from .trainer import minibatch_kmeans, sample_dataset

    cfg = _load_config(args)
    matrix = _read_matrix(args.input[0])
    train_idx, _ = sample_dataset(
        matrix.shop_ids, matrix.strata, cfg.trainer, derive_rng(cfg.seed, "train/split")
    )
    import numpy as np

    values = matrix.values.astype(np.float64)
    _, centers = minibatch_kmeans(
        values[train_idx],
        cfg.model.codebook_size,
        derive_rng(cfg.seed, "baseline/kmeans"),
        batch_size=cfg.baseline.batch_size,
        iterations=cfg.baseline.iterations,
    )
    d2 = (
        np.sum(values**2, axis=1)[:, None]
        - 2.0 * values @ centers.T
        + np.sum(centers**2, axis=1)[None, :]
    )
    tokens = np.argmin(d2, axis=1)
    _write_assignments(args.output, matrix, tokens)
    print(f"wrote baseline assignments for {len(matrix)} rows to {args.output}")


def _cmd_assign(args) -> None:
    from .population import assign_tokens

    model, matrix = _load_model_and_matrix(args.input[0], args.input[1])
    tokens = assign_tokens(model, matrix.values)
    _write_assignments(args.output, matrix, tokens)
    print(f"wrote {len(matrix)} token assignments to {args.output}")


def _cmd_profiles(args) -> None:
    profiles, _ = _compute_profiles(args)
    doc = {"profiles": [profiles[t].as_dict() for t in sorted(profiles)]}
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(f"wrote {len(profiles)} token profiles to {args.output}")


def _cmd_distribution(args) -> None:
    from .population import distribution_report
    from .report import render_distribution_figure

    profiles, ctx = _compute_profiles(args)
    matrix, labels, tokens, keep = ctx["matrix"], ctx["labels"], ctx["tokens"], ctx["active_rows"]
    report = distribution_report(
        [matrix.shop_ids[i] for i in keep],
        tokens[keep],
        [matrix.stratum(i).value for i in keep],
        ctx["raw_scalars"][keep],
        {name: labels.bins[name][keep] for name in labels.bins},
        ctx["model"].codebook.size,
        profiles=profiles,
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "distribution.json", report)
    with open(out / "distribution_shops.tsv", "w", encoding="utf-8") as fh:
        fh.write("shop_id\tbuyers\tjs_divergence\t" +
                 "\t".join(f"true_{s}\tpred_{s}" for s in "ABCD") + "\n")
        for row in report["shops"]:
            cells = [row["shop_id"], str(row["buyers"]), repr(row["js_divergence"])]
            for s in "ABCD":
                cells.append(repr(row["true_strata"][s]))
                cells.append(repr(row["predicted_strata"][s]))
            fh.write("\t".join(cells) + "\n")
    render_distribution_figure(report, str(out / "distribution.png"))
    print(
        f"mean JS divergence {report['mean_js']:.4f} over {len(report['shops'])} shops; "
        f"report in {out}"
    )


def _cmd_eval_clusters(args) -> None:
    import numpy as np

    from .config import derive_rng
    from .metrics import cluster_report
    from .report import render_cluster_figure

    cfg = _load_config(args)
    matrix = _read_matrix(args.input[0])
    labels = _read_labels(args.input[1])
    assignment_map = _read_assignments(args.input[2])
    keep, tokens = [], []
    for i in range(len(matrix)):
        key = (matrix.buyer_ids[i], matrix.shop_ids[i])
        if matrix.stratum(i).value == "E" or key not in assignment_map:
            continue
        keep.append(i)
        tokens.append(assignment_map[key])
    keep = np.asarray(keep)
    tokens = np.asarray(tokens)
    report = cluster_report(
        matrix.values[keep],
        tokens,
        [matrix.stratum(i).value for i in keep],
        {name: labels.bins[name][keep] for name in labels.bins},
        cfg.metrics,
        derive_rng(cfg.seed, "eval/clusters"),
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "clusters.json", report)
    with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
        fh.write("token\tsize\tpurity\tincompatible\tA\tB\tC\tD\n")
        for row in report["clusters"]:
            fh.write(
                f"{row['token']}\t{row['size']}\t{row['purity']!r}\t{int(row['incompatible'])}"
                f"\t{row['strata']['A']}\t{row['strata']['B']}"
                f"\t{row['strata']['C']}\t{row['strata']['D']}\n"
            )
    render_cluster_figure(report, str(out / "clusters.png"))
    print(
        f"mean purity {report['mean_purity']:.4f}, "
        f"incoherence {{{', '.join(f'{k}: {v:.4f}' for k, v in sorted(report['incoherence'].items()))}}}; "
        f"report in {out}"
    )


def _cmd_eval_alignment(args) -> None:
    from .config import derive_rng
    from .metrics import (
        pairing_study,
        policy_simulate,
        real_conversion_stats,
        simulated_agent_stats,
    )
    from .report import render_alignment_figure

    cfg = _load_config(args)
    profiles, ctx = _compute_profiles(args)
    token_map = {
        (ctx["matrix"].buyer_ids[i], ctx["matrix"].shop_ids[i]): int(ctx["tokens"][i])
        for i in range(len(ctx["matrix"]))
    }
    real = real_conversion_stats(ctx["aggregates"], token_map)
    simulated = policy_simulate(
        profiles, sorted(real), derive_rng(cfg.seed, "eval/alignment-sim"), cfg.simulator
    )
    study = pairing_study(
        real, simulated_agent_stats(simulated), derive_rng(cfg.seed, "eval/alignment-pairing")
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "alignment.json", study)
    with open(out / "alignment.tsv", "w", encoding="utf-8") as fh:
        fh.write("shop\ttoken\tstratum\treal_atc\tagent_atc\treal_pur\tagent_pur\tara_correct\n")
        for row in study["rows"]:
            fh.write(
                f"{row['shop']}\t{row['token']}\t{row['stratum']}"
                f"\t{row['real_atc']!r}\t{row['agent_atc']!r}"
                f"\t{row['real_pur']!r}\t{row['agent_pur']!r}\t{row['correct'][2]!r}\n"
            )
    render_alignment_figure(study, str(out / "alignment.png"))
    s = study["stratified_ara"]
    print(
        f"stratified ARA correct {s['correct']:.4f} vs all-mismatch {s['all_mismatch']:.4f}; "
        f"report in {out}"
    )


def _cmd_eval_separation(args) -> None:
    from .config import derive_rng
    from .metrics import policy_simulate, real_conversion_stats, separation_report
    from .report import render_separation_figure

    cfg = _load_config(args)
    profiles, ctx = _compute_profiles(args)
    token_map = {
        (ctx["matrix"].buyer_ids[i], ctx["matrix"].shop_ids[i]): int(ctx["tokens"][i])
        for i in range(len(ctx["matrix"]))
    }
    real = real_conversion_stats(ctx["aggregates"], token_map)
    simulated = policy_simulate(
        profiles, sorted(real), derive_rng(cfg.seed, "eval/separation-sim"), cfg.simulator
    )
    report = separation_report(
        profiles,
        simulated,
        n_permutations=cfg.metrics.permutation_rounds,
        rng=derive_rng(cfg.seed, "eval/separation-perm"),
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "separation.json", report)
    with open(out / "separation.tsv", "w", encoding="utf-8") as fh:
        fh.write("head\tmean_low\tmean_medium\tmean_high\tcohens_d\twelch_p\tkruskal_p\tpermutation_p\n")
        for head in sorted(report):
            entry = report[head]
            means = entry["mean_scores"]
            stats = entry.get("stats") or {}
            fh.write(
                f"{head}\t{means[0]!r}\t{means[1]!r}\t{means[2]!r}"
                f"\t{stats.get('cohens_d')!r}\t{stats.get('welch_p')!r}"
                f"\t{stats.get('kruskal_p')!r}\t{stats.get('permutation_p')!r}\n"
            )
    render_separation_figure(report, str(out / "separation.png"))
    print(f"separation report for {len(report)} heads in {out}")


def _cmd_traces(args) -> None:
    from .events import Stratum, read_events
    from .population import assign_tokens
    from .traces import emit_traces, serialize_record

    events_path, artifact_path, features_path = args.input
    model, matrix = _load_model_and_matrix(artifact_path, features_path)
    tokens = assign_tokens(model, matrix.values)
    token_map = {}
    strata_map = {}
    for i in range(len(matrix)):
        key = (matrix.buyer_ids[i], matrix.shop_ids[i])
        token_map[key] = int(tokens[i])
        strata_map[key] = Stratum(matrix.stratum(i).value)

    sessions: dict[tuple[str, str, str], list] = {}
    with open(events_path, "r", encoding="utf-8") as fh:
        for event in read_events(fh):
            sessions.setdefault(
                (event.buyer_id, event.shop_id, event.session_id), []
            ).append(event)
    records, diagnostics = emit_traces(
        sessions.values(), token_map, strata_map, args.stage, model.codebook.size
    )
    with open(args.output, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(serialize_record(record) + "\n")
    print(
        f"wrote {len(records)} trace records (stage {args.stage}) to {args.output}; "
        f"skipped {len(diagnostics)} sessions"
    )


# ---------------------------------------------------------------------------
# shared plumbing


def _read_matrix(path: str):
    from .features import read_features

    with open(path, "rb") as fh:
        return read_features(fh)


def _read_labels(path: str):
    from .objective import read_labels

    with open(path, "r", encoding="utf-8") as fh:
        return read_labels(fh)


def _read_aggs(path: str):
    from .events import read_aggregates

    with open(path, "r", encoding="utf-8") as fh:
        return read_aggregates(fh)


def _strata_codes(aggregates):
    import numpy as np

    from .features import STRATUM_TO_CODE

    return np.asarray([STRATUM_TO_CODE[a.stratum] for a in aggregates], dtype=np.uint8)


def _load_model_and_matrix(artifact_path: str, features_path: str):
    from .artifact import ModelArtifact, model_from_artifact
    from .errors import ShapeError

    with open(artifact_path, "rb") as fh:
        artifact = ModelArtifact.load(fh)
    model, _, _ = model_from_artifact(artifact)
    matrix = _read_matrix(features_path)
    if matrix.values.shape[1] != model.encoder.in_dim:
        raise ShapeError(
            f"feature width {matrix.values.shape[1]} does not match the artifact's "
            f"encoder width {model.encoder.in_dim}"
        )
    return model, matrix


def _write_assignments(path: str, matrix, tokens) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("buyer_id\tshop_id\ttoken\n")
        for i in range(len(matrix)):
            fh.write(f"{matrix.buyer_ids[i]}\t{matrix.shop_ids[i]}\t{int(tokens[i])}\n")


def _read_assignments(path: str) -> dict[tuple[str, str], int]:
    from .errors import FormatError

    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["buyer_id", "shop_id", "token"]:
            raise FormatError(f"unexpected assignment header {header}")
        for line in fh:
            if not line.strip():
                continue
            buyer_id, shop_id, token = line.rstrip("\n").split("\t")
            out[(buyer_id, shop_id)] = int(token)
    return out


def _profiles_over_rows(matrix, labels, aggregates, tokens, rows):
    """Token profiles computed over the given matrix rows."""
    import numpy as np

    from .population import build_profiles

    by_key = {(a.buyer_id, a.shop_id): a for a in aggregates}
    raw_scalars = np.stack(
        [
            by_key[(matrix.buyer_ids[i], matrix.shop_ids[i])].scalar_values()
            for i in range(len(matrix))
        ]
    )
    strata_letters = np.asarray([matrix.stratum(i).value for i in range(len(matrix))])
    rows = np.asarray(rows)
    return build_profiles(
        np.asarray(tokens)[rows],
        strata_letters[rows],
        raw_scalars[rows],
        {name: labels.bins[name][rows] for name in labels.bins},
    )


def _compute_profiles(args):
    """Assign tokens and build token profiles for the artifact-driven commands.

    Returns (profiles, context) where context carries the matrix, labels,
    aggregates, tokens, raw scalars, and the non-E row indices.
    """
    import numpy as np

    from .config import derive_rng
    from .population import assign_tokens, build_profiles
    from .trainer import sample_dataset

    cfg = _load_config(args)
    artifact_path, features_path, labels_path, aggregates_path = args.input
    model, matrix = _load_model_and_matrix(artifact_path, features_path)
    labels = _read_labels(labels_path)
    aggregates = _read_aggs(aggregates_path)
    by_key = {(a.buyer_id, a.shop_id): a for a in aggregates}
    raw_scalars = np.stack(
        [
            by_key[(matrix.buyer_ids[i], matrix.shop_ids[i])].scalar_values()
            for i in range(len(matrix))
        ]
    )
    tokens = assign_tokens(model, matrix.values)
    strata_letters = np.asarray([matrix.stratum(i).value for i in range(len(matrix))])
    active_rows = np.flatnonzero(strata_letters != "E")

    reference = getattr(args, "reference", "all")
    if reference == "train":
        train_idx, _ = sample_dataset(
            matrix.shop_ids, matrix.strata, cfg.trainer, derive_rng(cfg.seed, "train/split")
        )
        rows = train_idx
    else:
        rows = active_rows
    profiles = build_profiles(
        tokens[rows],
        strata_letters[rows],
        raw_scalars[rows],
        {name: labels.bins[name][rows] for name in labels.bins},
    )
    context = {
        "cfg": cfg,
        "model": model,
        "matrix": matrix,
        "labels": labels,
        "aggregates": aggregates,
        "tokens": tokens,
        "raw_scalars": raw_scalars,
        "active_rows": active_rows,
    }
    return profiles, context


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


if __name__ == "__main__":
    sys.exit(main())
