# %% [markdown]
# # The command line pipeline end to end
#
# Writes a simulated interaction log in the tutor-export CSV layout, then
# drives `mtlpath prepare`, `train`, `evaluate`, `compare` and `gradcheck`
# exactly as a user would from a shell. Everything lands in ./pipeline_run.

# %%
import subprocess
import sys
from pathlib import Path

from mtlpath.synthetic import simulate_rows, write_log_csv

work = Path("pipeline_run")
work.mkdir(exist_ok=True)
write_log_csv(simulate_rows(num_users=300, length=30, num_concepts=20, seed=1), work / "log.csv")


def mtlpath(*args):
    cmd = [sys.executable, "-m", "mtlpath", *map(str, args)]
    print("$", " ".join(cmd[2:]))
    done = subprocess.run(cmd, capture_output=True, text=True)
    print(done.stdout + done.stderr)
    return done.returncode


# %% [markdown]
# One prepared directory per path length; `compare` looks for `m<M>/` below
# the directory it is given.

# %%
for m in (3, 5, 7, 9):
    mtlpath("prepare", "--input", work / "log.csv", "--out", work / "data" / f"m{m}", "--n", 10, "--m", m)

# %% [markdown]
# Hyperparameters can live in a key = value file; flags on the command line win.

# %%
(work / "small.conf").write_text("epochs = 5\nembed_dim = 32\nhidden = 32\n")
mtlpath("train", "--config", work / "small.conf", "--data", work / "data" / "m3", "--out", work / "mtl.ckpt", "--jsonl", work / "epochs.jsonl")
mtlpath("evaluate", "--ckpt", work / "mtl.ckpt", "--data", work / "data" / "m3")
mtlpath("evaluate", "--ckpt", work / "mtl.ckpt", "--data", work / "data" / "m3", "--no-repeat")

# %%
mtlpath("compare", "--config", work / "small.conf", "--data", work / "data", "--seeds", 1, "--out", work / "grid.csv")
subprocess.run([sys.executable, str(Path(__file__).with_name("plot_length_curves.py")), work / "grid.csv", work / "length_curves.png"])

# %%
mtlpath("gradcheck")
