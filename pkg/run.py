#!/usr/bin/env python3
"""
MRDD - Two-stage multi-view representation learning
Startup script for the run registry API and the command line
"""

import sys


def print_banner():
    print("""
    ╔══════════════════════════════════════════════════════════════╗
    ║                         MRDD v1.0.0                          ║
    ║        Two-stage multi-view representation learning          ║
    ║                                                              ║
    ║  Features:                                                   ║
    ║  • Masked cross-view prediction for the consistent code     ║
    ║  • CLUB-disentangled view-specific codes                    ║
    ║  • Clustering / classification evaluation                   ║
    ║  • MINE audit of residual redundancy                        ║
    ║  • Sweeps, ablations and PDF/JSON run reports               ║
    ╚══════════════════════════════════════════════════════════════╝
    """)


def check_python_version():
    """Check if Python version is compatible"""
    if sys.version_info < (3, 9):
        print("❌ Error: Python 3.9 or higher is required")
        print(f"   Current version: {sys.version}")
        sys.exit(1)
    print(f"✅ Python version: {sys.version.split()[0]}")


def check_dependencies():
    """Check if required dependencies are installed"""
    try:
        import torch
        import sklearn
        import fastapi
        import sqlalchemy
        import reportlab
        print(f"✅ Dependencies: OK (torch {torch.__version__}, scikit-learn {sklearn.__version__})")
    except ImportError as e:
        print(f"❌ Missing dependency: {e}")
        print("   Run: pip install -r requirements.txt")
        sys.exit(1)


def start_server():
    """Start the FastAPI run registry"""
    print("🚀 Starting MRDD run service on http://0.0.0.0:8000 ...")
    from mrdd.main import serve
    try:
        serve(host="0.0.0.0", port=8000)
    except KeyboardInterrupt:
        print("\n🛑 Server stopped by user")


def main():
    """Main entry point"""
    print_banner()

    check_python_version()
    check_dependencies()

    mode = sys.argv[1].lower() if len(sys.argv) > 1 else "serve"

    if mode == "serve":
        start_server()
    elif mode == "cli":
        from mrdd.cli import main as cli_main
        sys.exit(cli_main(sys.argv[2:]))
    else:
        print("Usage: python run.py [serve|cli <command> ...]")
        print("  serve - Start the run registry API (default)")
        print("  cli   - Run an mrdd command, e.g. python run.py cli run --config exp.json")
        sys.exit(1)


if __name__ == "__main__":
    main()
