import csv
import hashlib
import io
import json
import shutil

import numpy as np
import pytest

from batcall import cli
from batcall import datagen as dg
from batcall.dsp import write_wav
from batcall.model import BatConfig, BatModel, load_checkpoint, save_checkpoint
from batcall.training import DEFAULT_GRID, DivergenceError, tune_threshold


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.reader(f))


def forced_checkpoint(path, on, species=("sp00", "sp01", "sp02", "sp03")):
    """A checkpoint whose head bias pins every score to 1 (``on``) or 0."""
    model = BatModel(BatConfig(num_classes=len(species), species=tuple(species)), seed=0)
    bias = np.where(np.isin(np.arange(len(species)), on), 40.0, -40.0)
    model.params["head.bias"].data[...] = bias
    save_checkpoint(model, path)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> preprocess -> train (2 epochs) on a small corpus."""
    root = tmp_path_factory.mktemp("cli")
    corpus, cache, run_dir = root / "corpus", root / "cache", root / "run"
    assert cli.main(["synth", str(corpus), "--num-species", "4", "--clips-per-species", "8", "--seed", "5"]) == 0
    assert cli.main(["preprocess", str(corpus / "manifest.json"), str(cache)]) == 0
    assert cli.main(["train", str(cache), str(run_dir), "--epochs", "2", "--seed", "5", "--quiet"]) == 0
    return corpus, cache, run_dir


# ---------------------------------------------------------------- synth


def test_synth_writes_corpus_and_is_repeatable(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "synth", a, "--num-species", "2", "--clips-per-species", "3", "--seed", "9")[0] == 0
    assert run(capsys, "synth", b, "--num-species", "2", "--clips-per-species", "3", "--seed", "9")[0] == 0
    assert len(list(a.rglob("*.wav"))) == 6
    assert digest(a / "manifest.json") == digest(b / "manifest.json")
    for wav in a.rglob("*.wav"):
        assert digest(wav) == digest(b / wav.relative_to(a))


def test_synth_rejects_nineteen_species(tmp_path, capsys):
    code, _, err = run(capsys, "synth", tmp_path / "c", "--num-species", "19")
    assert code == cli.EXIT_USAGE
    assert "1..18" in err


def test_synth_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "synth", blocker / "sub", "--num-species", "1", "--clips-per-species", "1")
    assert code == cli.EXIT_DATA and err


# ---------------------------------------------------------------- preprocess


def test_preprocess_one_sequence_recording(tmp_path, capsys):
    # 0.78 s of real time, stored 1:10 expanded at 96 kHz
    rng = np.random.default_rng(0)
    sp = dg.species_table(1)[0]
    clip = dg.synth_clip(sp, rng, duration=0.78)
    write_wav(tmp_path / "rec.wav", clip.samples, 96000)
    dg.DatasetManifest(["sp00"], [dg.ManifestEntry("rec.wav", 0, "train")]).save(tmp_path / "m.json")
    code, out, _ = run(capsys, "preprocess", tmp_path / "m.json", tmp_path / "cache")
    assert code == 0
    assert "train: 1 sequences" in out
    data = dg.read_cache(tmp_path / "cache" / "train.batd", 1)
    assert len(data) == 1
    # 171990 samples at 22.05 kHz -> 1340 frames -> 59 patches, one window
    assert data.patches[0].shape[0] == 59


def test_preprocess_empty_manifest(tmp_path, capsys):
    dg.DatasetManifest(["a"], []).save(tmp_path / "m.json")
    code, _, err = run(capsys, "preprocess", tmp_path / "m.json", tmp_path / "cache")
    assert code == cli.EXIT_DATA
    assert "no entries" in err


def test_preprocess_rerun_is_byte_identical(pipeline, tmp_path, capsys):
    corpus, cache, _ = pipeline
    assert run(capsys, "preprocess", corpus / "manifest.json", tmp_path / "again")[0] == 0
    for f in sorted(cache.iterdir()):
        assert digest(f) == digest(tmp_path / "again" / f.name), f.name


def test_preprocess_lists_missing_files(pipeline, tmp_path, capsys):
    corpus, _, _ = pipeline
    m = dg.DatasetManifest.load(corpus / "manifest.json")
    m.entries.append(dg.ManifestEntry(str(corpus / "nope.wav"), 0, "train"))
    m.save(tmp_path / "m.json")
    code, out, err = run(capsys, "preprocess", tmp_path / "m.json", tmp_path / "cache")
    assert code == cli.EXIT_DATA
    assert "nope.wav" in err
    assert "train:" in out
    assert (tmp_path / "cache" / "train.batd").exists()


# ---------------------------------------------------------------- config


def test_flags_override_config_file(pipeline, tmp_path, capsys):
    _, cache, _ = pipeline
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 3  # overridden below\nseed = 2\n")
    code, _, _ = run(capsys, "train", cache, tmp_path / "out", "--config", cfg, "--epochs", "1", "--quiet")
    assert code == 0
    rows = read_csv(tmp_path / "out" / "history.csv")
    assert len(rows) == 2
    echoed = cli.parse_config_text((tmp_path / "out" / "config.txt").read_text())
    assert echoed["train.epochs"] == "1"
    assert echoed["seed"] == "2"


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense.key = 4\n")
    assert run(capsys, "synth", tmp_path / "x", "--config", bad)[0] == cli.EXIT_USAGE
    bad.write_text("seed = four\n")
    assert run(capsys, "synth", tmp_path / "x", "--config", bad)[0] == cli.EXIT_USAGE
    assert run(capsys, "synth", tmp_path / "x", "--config", tmp_path / "absent.cfg")[0] == cli.EXIT_USAGE


def test_usage_errors(capsys):
    assert run(capsys)[0] == cli.EXIT_USAGE
    assert run(capsys, "train")[0] == cli.EXIT_USAGE
    assert run(capsys, "frobnicate")[0] == cli.EXIT_USAGE
    assert run(capsys, "eval", "c", "k", "--mode", "both")[0] == cli.EXIT_USAGE


# ---------------------------------------------------------------- train


def test_train_outputs(pipeline):
    _, _, run_dir = pipeline
    rows = read_csv(run_dir / "history.csv")
    assert len(rows) == 3
    for name in ("best.batc", "final.batc", "config.txt"):
        assert (run_dir / name).exists()
    model = load_checkpoint(run_dir / "best.batc")
    assert model.config.class_names == ["sp00", "sp01", "sp02", "sp03"]


def test_train_is_repeatable(pipeline, tmp_path, capsys):
    _, cache, run_dir = pipeline
    assert run(capsys, "train", cache, tmp_path / "again", "--epochs", "2", "--seed", "5", "--quiet")[0] == 0
    assert digest(run_dir / "history.csv") == digest(tmp_path / "again" / "history.csv")
    assert digest(run_dir / "best.batc") == digest(tmp_path / "again" / "best.batc")


def test_no_val_merges_validation(pipeline, tmp_path, capsys):
    _, cache, _ = pipeline
    n_train = len(dg.read_cache(cache / "train.batd", 4))
    n_val = len(dg.read_cache(cache / "val.batd", 4))
    code, out, _ = run(capsys, "train", cache, tmp_path / "nv", "--epochs", "1", "--no-val", "--quiet")
    assert code == 0
    assert f"training on {n_train + n_val} sequences" in out
    assert "validation: none" in out


def test_train_missing_cache(tmp_path, capsys):
    code, _, err = run(capsys, "train", tmp_path / "nowhere", tmp_path / "out")
    assert code == cli.EXIT_DATA and err


def test_train_divergence_exit_code(pipeline, tmp_path, capsys, monkeypatch):
    _, cache, _ = pipeline

    def boom(*args, **kwargs):
        raise DivergenceError("loss is nan", history=[])

    monkeypatch.setattr(cli, "fit", boom)
    code, _, err = run(capsys, "train", cache, tmp_path / "div", "--epochs", "1", "--quiet")
    assert code == cli.EXIT_NUMERIC
    assert "diverged" in err
    assert (tmp_path / "div" / "best.batc").exists()


# ---------------------------------------------------------------- eval


def test_eval_single_prints_accuracy(pipeline, tmp_path, capsys):
    _, cache, run_dir = pipeline
    code, out, _ = run(capsys, "eval", cache, run_dir / "best.batc", "--out-dir", tmp_path / "e")
    assert code == 0
    assert out.startswith("accuracy ")
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["accuracy"] is not None
    rows = read_csv(tmp_path / "e" / "confusion.csv")
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)


def test_eval_mixed_omits_accuracy(pipeline, tmp_path, capsys):
    _, cache, run_dir = pipeline
    code, out, _ = run(
        capsys, "eval", cache, run_dir / "best.batc", "--mode", "mixed", "--mix-samples", "12", "--out-dir", tmp_path / "e"
    )
    assert code == 0
    assert "accuracy" not in out
    assert "macro_f1" in out
    assert not (tmp_path / "e" / "confusion.csv").exists()


def test_eval_errors(pipeline, tmp_path, capsys):
    _, cache, run_dir = pipeline
    lonely = tmp_path / "lonely"
    lonely.mkdir()
    shutil.copy(cache / "species.json", lonely)
    assert run(capsys, "eval", lonely, run_dir / "best.batc", "--out-dir", tmp_path / "e")[0] == cli.EXIT_DATA
    junk = tmp_path / "junk.batc"
    junk.write_bytes(b"not a checkpoint")
    assert run(capsys, "eval", cache, junk, "--out-dir", tmp_path / "e")[0] == cli.EXIT_DATA


def test_forced_checkpoint_scores_perfectly_on_single_class_split(tmp_path, capsys):
    # every clip belongs to species 0 and the checkpoint always answers species 0
    rng = np.random.default_rng(3)
    sp = dg.species_table(2)[0]
    entries = []
    for i in range(3):
        write_wav(tmp_path / f"c{i}.wav", dg.synth_clip(sp, rng).samples, 96000)
        entries.append(dg.ManifestEntry(f"c{i}.wav", 0, "test"))
    dg.DatasetManifest(["sp00", "sp01"], entries).save(tmp_path / "m.json")
    assert run(capsys, "preprocess", tmp_path / "m.json", tmp_path / "cache")[0] == 0
    ckpt = forced_checkpoint(tmp_path / "f.batc", [0], species=("sp00", "sp01"))
    code, out, _ = run(capsys, "eval", tmp_path / "cache", ckpt, "--out-dir", tmp_path / "e")
    assert code == 0
    assert out.split() == ["accuracy", "1.0000", "micro_f1", "1.0000", "macro_f1", "1.0000"]


def test_threshold_sweep_matches_tune_threshold(pipeline, tmp_path, capsys):
    _, cache, run_dir = pipeline
    ckpt = run_dir / "best.batc"
    best, best_key = None, None
    for t in DEFAULT_GRID:
        out_dir = tmp_path / f"t{t}"
        argv = ["eval", cache, ckpt, "--split", "val", "--mode", "mixed", "--mix-samples", "16"]
        assert run(capsys, *argv, "--threshold", t, "--out-dir", out_dir)[0] == 0
        macro = json.loads((out_dir / "report.json").read_text())["macro_f1"]
        key = (macro, -abs(t - 0.5))
        if best_key is None or key > best_key:
            best, best_key = t, key
    cfg = cli.resolve_config({}, {"eval.mix_samples": 16})
    val = dg.read_cache(cache / "val.batd", 4, cache / "val.wave.batd")
    stream = cli._streams(val, cfg, "mixed", "val", 64)
    assert tune_threshold(load_checkpoint(ckpt), stream) == best


# ---------------------------------------------------------------- classify


@pytest.fixture
def wav_dir(pipeline, tmp_path):
    corpus, _, _ = pipeline
    d = tmp_path / "wavs"
    d.mkdir()
    for src in sorted(corpus.rglob("*.wav"))[::8][:2]:
        shutil.copy(src, d / src.name)
    return d


def test_classify_one_row_per_window(pipeline, wav_dir, tmp_path, capsys):
    _, _, run_dir = pipeline
    code, _, _ = run(capsys, "classify", wav_dir, run_dir / "best.batc", tmp_path / "out.csv", "--time-expanded")
    assert code == 0
    rows = read_csv(tmp_path / "out.csv")
    assert rows[0] == ["file", "start_ms", "end_ms", "predicted_species", "sp00", "sp01", "sp02", "sp03"]
    assert len(rows) == 3
    assert [r[0] for r in rows[1:]] == sorted(p.name for p in wav_dir.iterdir())
    for r in rows[1:]:
        assert float(r[1]) == 0.0
        # 8 patches span 198 frames = 197 * 128 + 512 samples at 22.05 kHz, in real time
        assert float(r[2]) == pytest.approx(25728 / 22050 / 10 * 1000, abs=1e-3)
        assert all(0 <= float(v) <= 1 for v in r[4:])


def test_classify_silence_and_unreadable(tmp_path, capsys):
    d = tmp_path / "wavs"
    d.mkdir()
    write_wav(d / "a_silence.wav", np.zeros(115200), 96000)
    (d / "b_broken.wav").write_bytes(b"RIFF1234WAVEjunk")
    (d / "notes.txt").write_text("ignored")
    ckpt = forced_checkpoint(tmp_path / "f.batc", [])
    assert run(capsys, "classify", d, ckpt, tmp_path / "out.csv", "--time-expanded")[0] == 0
    rows = read_csv(tmp_path / "out.csv")
    assert len(rows) == 3
    silence, broken = rows[1], rows[2]
    assert silence[0] == "a_silence.wav" and silence[3] == ""
    assert broken[0] == "b_broken.wav" and broken[3].startswith("ERROR")


def test_classify_csv_quotes_separators(pipeline, wav_dir, tmp_path, capsys):
    names = ("one,two", 'say "hi"', "plain", "semi;colon")
    ckpt = forced_checkpoint(tmp_path / "f.batc", [0, 1], species=names)
    assert run(capsys, "classify", wav_dir, ckpt, tmp_path / "out.csv", "--time-expanded")[0] == 0
    text = (tmp_path / "out.csv").read_text()
    assert '"one,two"' in text and '"say ""hi"""' in text
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0][4:] == list(names)
    assert rows[1][3] == 'one,two;say "hi"'


def test_classify_thread_count_does_not_change_output(pipeline, tmp_path, capsys):
    corpus, _, run_dir = pipeline
    d = tmp_path / "wavs"
    d.mkdir()
    for src in sorted(corpus.rglob("*.wav"))[:6]:
        shutil.copy(src, d / src.name)
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}.csv"
        argv = ["classify", d, run_dir / "best.batc", out, "--time-expanded", "--threads", threads]
        assert run(capsys, *argv)[0] == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_classify_missing_directory(pipeline, tmp_path, capsys):
    _, _, run_dir = pipeline
    assert run(capsys, "classify", tmp_path / "none", run_dir / "best.batc", tmp_path / "o.csv")[0] == cli.EXIT_DATA


# ---------------------------------------------------------------- explain


def test_explain_two_labels_writes_five_images(pipeline, tmp_path, capsys):
    import matplotlib.image as mpimg

    corpus, _, _ = pipeline
    wav = sorted(corpus.rglob("*.wav"))[0]
    ckpt = forced_checkpoint(tmp_path / "f.batc", [1, 3])
    code, out, _ = run(capsys, "explain", wav, ckpt, tmp_path / "img", "--time-expanded")
    assert code == 0
    pngs = sorted(p.name for p in (tmp_path / "img").glob("*.png"))
    assert pngs == [
        "activation_sp01.png",
        "activation_sp03.png",
        "masked_sp01.png",
        "masked_sp03.png",
        "spectrogram.png",
    ]
    # one pixel per spectrogram cell: 257 bins by 7 * 22 + 44 stitched frames
    for name in pngs:
        assert mpimg.imread(tmp_path / "img" / name).shape[:2] == (257, 198)
    assert "sp01" in out and "sp03" in out


def test_explain_without_labels_warns(pipeline, tmp_path, capsys):
    corpus, _, _ = pipeline
    wav = sorted(corpus.rglob("*.wav"))[0]
    ckpt = forced_checkpoint(tmp_path / "f.batc", [])
    with pytest.warns(UserWarning, match="no species"):
        code, _, _ = run(capsys, "explain", wav, ckpt, tmp_path / "img", "--time-expanded")
    assert code == 0
    assert [p.name for p in (tmp_path / "img").glob("*.png")] == ["spectrogram.png"]


def test_explain_errors(pipeline, tmp_path, capsys):
    corpus, _, run_dir = pipeline
    wav = sorted(corpus.rglob("*.wav"))[0]
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"nope")
    assert run(capsys, "explain", bad, run_dir / "best.batc", tmp_path / "o", "--time-expanded")[0] == cli.EXIT_DATA
    argv = ["explain", wav, run_dir / "best.batc", tmp_path / "o", "--time-expanded", "--window", "3"]
    assert run(capsys, *argv)[0] == cli.EXIT_USAGE
