#!/usr/bin/env python3
"""
Setup script for the singular solution laboratory
"""

import logging
import os
import shutil
import subprocess
import sys

logger = logging.getLogger('setup')

REQUIRED_MODULES = ['numpy', 'scipy', 'sympy', 'matplotlib', 'dotenv', 'pytest', 'hypothesis']


def run_command(command, description):
    """Run a command and handle errors"""
    logger.info("%s...", description)
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        logger.info("%s completed successfully", description)
        return True
    except subprocess.CalledProcessError as e:
        logger.error("%s failed: %s\n%s", description, e, e.stderr)
        return False


def check_python_version():
    """Check if Python version is compatible"""
    if sys.version_info < (3, 8):
        logger.error("Python 3.8 or higher is required")
        return False
    logger.info("Python %s is compatible", sys.version.split()[0])
    return True


def install_dependencies():
    return run_command("pip install -r requirements.txt", "Installing Python packages")


def create_directories():
    """Create the output folders named in the environment"""
    from config import Config
    Config.ensure_directories()
    logger.info("Created %s and %s", Config.OUTPUT_FOLDER, Config.TEMP_FOLDER)
    return True


def setup_environment():
    """Create .env from env_example.txt when missing"""
    if os.path.exists('.env'):
        logger.info(".env file already exists")
        return True
    if not os.path.exists('env_example.txt'):
        logger.warning("env_example.txt not found; defaults from config.py apply")
        return False
    shutil.copy('env_example.txt', '.env')
    logger.info("Created .env file from env_example.txt")
    return True


def test_imports():
    """Test if all required modules can be imported"""
    failed_imports = []
    for module in REQUIRED_MODULES:
        try:
            __import__(module)
        except ImportError:
            failed_imports.append(module)
    if failed_imports:
        logger.error("Failed to import: %s; install them with pip install -r requirements.txt",
                     ', '.join(failed_imports))
        return False
    logger.info("All required modules imported successfully")
    return True


def main():
    logging.basicConfig(level=logging.INFO, format='%(levelname)s - %(message)s')
    if not check_python_version():
        sys.exit(1)
    if not install_dependencies():
        logger.warning("Some dependencies failed to install. Continuing...")
    setup_environment()
    create_directories()
    if not test_imports():
        sys.exit(1)
    logger.info("Setup completed. Next: pytest -m 'not slow', then ./start.sh manifests/identity.ini")


if __name__ == "__main__":
    main()
