"""
Invoke tasks for metapu.

Usage:
    Setup:
        invoke install           - Install dependencies

    Demo pipeline (tiny profile, builtin shapes):
        invoke make-demo-dataset - Cut patches from the builtin shapes into data/demo
        invoke train-demo        - Train the tiny profile on data/demo
        invoke eval-demo         - Evaluate the demo checkpoint at R = 2, 2.5, 4
        invoke demo              - All three in order

    Testing:
        invoke test              - Run the default test suite (slow tests deselected)
        invoke test-unit         - Run only unit tests (fast)
        invoke test-slow         - Run the slow training trend checks
        invoke test-cov          - Run tests with coverage report
        invoke test-cov-html     - Run tests with HTML coverage report

    Development:
        invoke lint              - Run linting checks
        invoke format-code       - Format code
        invoke build-docs        - Build Sphinx documentation

    Cleanup:
        invoke clean             - Remove demo outputs and caches
"""
from invoke import task
from pathlib import Path


PROJECT_ROOT = Path(__file__).parent
DEMO_DATA = PROJECT_ROOT / "data" / "demo"
DEMO_RUN = PROJECT_ROOT / "runs" / "demo"


@task
def install(c):
    """Install dependencies."""
    print("📦 Installing dependencies...")
    c.run("uv sync", pty=True)
    print("✅ Dependencies installed")


@task(help={
    "patches": "Patches per model (default 20)",
    "n_max": "Points per training target (default 256)",
    "seed": "Random seed (default 0)",
})
def make_demo_dataset(c, patches=20, n_max=256, seed=0):
    """Cut a small dataset from the builtin shapes."""
    print("📦 Building demo dataset...")
    c.run(f"uv run metapu make-dataset --out {DEMO_DATA} --builtin torus relief cylinder sphere "
          f"--patches {patches} --n-max {n_max} --seed {seed} --force", pty=True)


@task(help={"steps": "Optimizer steps (default 200)"})
def train_demo(c, steps=200):
    """Train the tiny profile on the demo dataset."""
    print("🏋️  Training tiny profile...")
    c.run(f"uv run metapu train --profile tiny --manifest {DEMO_DATA} --out {DEMO_RUN / 'tiny.mpu'} "
          f"--steps {steps} --batch-size 8", pty=True)


@task(help={"scales": "Comma-separated scale factors (default 2,2.5,4)"})
def eval_demo(c, scales="2,2.5,4"):
    """Evaluate the demo checkpoint with mesh metrics and baselines."""
    print("📊 Evaluating demo checkpoint...")
    c.run(f"uv run metapu eval --checkpoint {DEMO_RUN / 'tiny.mpu'} --manifest {DEMO_DATA} "
          f"--scales {scales} --mesh-metrics --baselines --report {DEMO_RUN / 'report.json'} "
          f"--plot {DEMO_RUN / 'curves.html'}", pty=True)
    print(f"✅ Report written to {DEMO_RUN / 'report.json'}")


@task(pre=[make_demo_dataset, train_demo, eval_demo])
def demo(c):
    """Dataset, training and evaluation on the builtin shapes."""
    print("\n✅ Demo complete.")


@task
def test(c):
    """Run the default test suite."""
    print("🧪 Running tests...")
    c.run("uv run pytest", pty=True)


@task
def test_unit(c):
    """Run only unit tests (fast)."""
    print("🧪 Running unit tests...")
    c.run("uv run pytest tests/test_*_unit.py -v", pty=True)


@task
def test_slow(c):
    """Run the slow training trend checks."""
    print("🧪 Running slow tests...")
    c.run("uv run pytest -m slow", pty=True)


@task
def test_cov(c):
    """Run tests with coverage report."""
    print("🧪 Running tests with coverage...")
    c.run("uv run pytest --cov=src/metapu --cov-report=term-missing", pty=True)


@task
def test_cov_html(c):
    """Run tests with HTML coverage report."""
    print("🧪 Running tests with HTML coverage...")
    c.run("uv run pytest --cov=src/metapu --cov-report=html", pty=True)
    print("✅ Coverage report in htmlcov/index.html")


@task
def lint(c):
    """Run linting checks."""
    print("🔍 Running linting checks...")
    c.run("uv run ruff check src/", pty=True)


@task
def format_code(c):
    """Format code."""
    print("✨ Formatting code...")
    c.run("uv run ruff format src/", pty=True)


@task
def build_docs(c):
    """Build Sphinx documentation."""
    print("📚 Building documentation...")
    c.run("cd docs && uv run sphinx-build -W --keep-going -b html . _build/html", pty=True)
    print("✅ Documentation built in docs/_build/html/")


@task
def clean(c):
    """Remove demo outputs, built docs and caches."""
    print("🧹 Cleaning...")
    c.run(f"rm -rf {DEMO_DATA} {DEMO_RUN} docs/_build htmlcov .coverage", pty=True)
    c.run("find . -type d -name '__pycache__' -exec rm -rf {} + 2>/dev/null || true")
    c.run("find . -name '*.pyc' -delete 2>/dev/null || true")
    print("✅ Clean")
